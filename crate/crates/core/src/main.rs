fn main() {
    std::process::exit(filmworld::cli::run(std::env::args_os()));
}
