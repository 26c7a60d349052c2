fn main() {
    std::process::exit(statsmerge::cli::run(std::env::args_os()));
}
