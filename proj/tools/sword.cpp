#include "sword/cli.hpp"

int main(int argc, char** argv) { return sword::cli::main(argc, argv); }
