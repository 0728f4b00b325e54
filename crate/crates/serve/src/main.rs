fn main() {
    std::process::exit(radfield_serve::cli::run(std::env::args_os()));
}
