#include "vbltr/cli.hpp"

int main(int argc, char** argv) { return vbltr::run_cli(argc, argv); }
