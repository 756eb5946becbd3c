fn main() {
    std::process::exit(spfg::cli::run(std::env::args_os()));
}
