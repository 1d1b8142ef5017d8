fn main() {
    std::process::exit(drlora_cli::run(std::env::args_os()));
}
