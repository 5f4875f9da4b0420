fn main() {
    std::process::exit(hfl::cli::main());
}
