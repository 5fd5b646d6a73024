#include "segqa/cli.hpp"

int main(int argc, char** argv) { return segqa::cli::run(argc, argv); }
