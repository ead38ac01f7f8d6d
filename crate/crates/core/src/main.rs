fn main() {
    std::process::exit(mmave::cli::main_exit_code());
}
