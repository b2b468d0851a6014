#include "pasta/cli.hpp"

int main(int argc, char** argv) { return pasta::run_cli(argc, argv); }
