#include "qens/cli.hpp"

int main(int argc, char** argv) { return qens::cli::run(argc, argv); }
