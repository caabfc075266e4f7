fn main() {
    std::process::exit(pemfds::cli::main_with_args(std::env::args_os()));
}
