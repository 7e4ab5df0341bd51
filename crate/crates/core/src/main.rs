fn main() {
    std::process::exit(seqfusion::cli::run(std::env::args_os()));
}
