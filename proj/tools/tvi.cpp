#include "tvi/cli.hpp"

int main(int argc, char** argv) { return tvi::run_cli(argc, argv); }
