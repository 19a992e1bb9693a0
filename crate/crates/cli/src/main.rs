fn main() {
    std::process::exit(promptseg_cli::app::run(std::env::args_os()));
}
