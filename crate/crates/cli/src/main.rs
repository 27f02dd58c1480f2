use clap::Parser;

fn main() {
    let args = measureflow::Args::parse();
    std::process::exit(measureflow::run(&args));
}
