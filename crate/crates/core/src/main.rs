fn main() {
    std::process::exit(routelab::cli::run(std::env::args_os()));
}
