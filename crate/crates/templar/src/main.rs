use templar::cli;

fn main() {
    std::process::exit(cli::dispatch(std::env::args_os()));
}
