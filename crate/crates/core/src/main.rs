fn main() {
    std::process::exit(atn_core::cli::main());
}
