#include "enrt/cli.hpp"

int main(int argc, char** argv) { return enrt::cli::run_cli(argc, argv); }
