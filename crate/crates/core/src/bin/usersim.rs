fn main() {
    std::process::exit(usersim::cli::run(std::env::args_os()));
}
