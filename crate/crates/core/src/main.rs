fn main() {
    std::process::exit(tigmt::cli::run(std::env::args_os()));
}
