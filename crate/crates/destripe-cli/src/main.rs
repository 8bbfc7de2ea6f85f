fn main() {
    std::process::exit(destripe_cli::run(std::env::args_os()));
}
