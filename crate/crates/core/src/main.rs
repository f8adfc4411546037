fn main() {
    std::process::exit(innerloop::cli::run(std::env::args_os()));
}
