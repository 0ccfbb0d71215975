fn main() {
    let (mut out, mut err) = (std::io::stdout(), std::io::stderr());
    std::process::exit(advshield::cli::run(std::env::args_os(), &mut out, &mut err));
}
