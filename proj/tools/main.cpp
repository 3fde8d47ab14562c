#include "vqr/cli.hpp"

int main(int argc, char** argv) { return vqr::run_cli(argc, argv); }
