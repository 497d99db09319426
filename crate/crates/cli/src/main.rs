fn main() {
    std::process::exit(blk_cli::run(std::env::args_os()));
}
