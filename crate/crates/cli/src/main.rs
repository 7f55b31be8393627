use std::io::Write;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| writeln!(buf, "level={} {}", record.level(), record.args()))
        .init();
    std::process::exit(fundus_cli::run_from(std::env::args_os()));
}
