fn main() {
    std::process::exit(cinn::cli::cli_main(std::env::args_os()));
}
