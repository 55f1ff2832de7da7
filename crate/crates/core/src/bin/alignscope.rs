fn main() {
    std::process::exit(alignscope::cli::run_command(std::env::args_os()));
}
