fn main() {
    std::process::exit(crossimpact::cli::run(std::env::args_os(), std::env::vars()));
}
