fn main() {
    std::process::exit(karyogate::cli::main_with_args(std::env::args_os()));
}
