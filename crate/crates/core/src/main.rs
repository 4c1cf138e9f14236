fn main() {
    std::process::exit(jarzmle::cli::run(std::env::args_os()));
}
