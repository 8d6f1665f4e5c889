fn main() {
    std::process::exit(mseqa::cli::main_with_args(std::env::args_os()));
}
