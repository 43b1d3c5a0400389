fn main() {
    std::process::exit(nfsails::cli::run(std::env::args_os()));
}
