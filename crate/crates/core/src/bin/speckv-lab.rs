fn main() {
    std::process::exit(speckv_lab::cli::run(std::env::args_os()));
}
