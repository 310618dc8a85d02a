fn main() {
    std::process::exit(tetranet::cli::run(std::env::args_os()));
}
