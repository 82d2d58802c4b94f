fn main() { std::process::exit(voxcam_cli::dispatch(&std::env::args().collect::<Vec<_>>())) }
