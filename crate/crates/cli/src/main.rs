fn main() {
    std::process::exit(dnal_cli::cli_main(std::env::args_os()));
}
