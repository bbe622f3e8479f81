fn main() {
    std::process::exit(shiftlab::cli::main());
}
