#include "cli.hpp"

int main(int argc, char** argv) { return cozinb::cli::run(argc, argv); }
