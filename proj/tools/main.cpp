#include "vcmm/cli.hpp"

int main(int argc, char** argv) { return vcmm::run_cli(argc, argv); }
