#pragma once
// Command-line entry point: build-dataset, train, eval, recommend, purify,
// report. Every run resolves one config (file + overrides), writes a
// resolved-config snapshot into the output directory, and exits 0 only when
// all requested artifacts were written (1 usage, 2 missing input, 3 numeric
// failure).

#include <string>
#include <vector>

namespace segqa::cli {

int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

}  // namespace segqa::cli
