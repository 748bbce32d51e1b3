fn main() {
    std::process::exit(upf_sim::cli::dispatch(std::env::args_os()));
}
