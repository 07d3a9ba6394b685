#include "nasp/cli/stages.hpp"

int main(int argc, char** argv) { return nasp::cli::run_cli(argc, argv); }
