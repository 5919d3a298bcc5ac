fn main() {
    std::process::exit(ctf_cli::run(std::env::args_os()));
}
