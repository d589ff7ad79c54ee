fn main() {
    let code = rope_lens::cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
