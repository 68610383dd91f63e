fn main() {
    std::process::exit(csg_emos::cli::main_with_args(std::env::args_os()));
}
