fn main() {
    std::process::exit(taskdrop::cli::cli_main(std::env::args().collect()));
}
