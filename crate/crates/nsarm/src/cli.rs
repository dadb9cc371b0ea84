//! Command-line entry point. Placeholder while subsystems land.

pub fn main() {
    eprintln!("nsarm: not yet wired");
    std::process::exit(1);
}
