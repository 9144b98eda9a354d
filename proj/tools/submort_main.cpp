#include "submort/cli.hpp"

int main(int argc, char** argv) { return submort::cli::run(argc, argv); }
