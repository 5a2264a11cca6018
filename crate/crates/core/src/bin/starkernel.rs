fn main() {
    std::process::exit(starkernel::cli::run(std::env::args_os()));
}
