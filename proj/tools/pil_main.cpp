#include "pil/cli.hpp"

int main(int argc, char** argv) { return pil::run_cli(argc, argv); }
