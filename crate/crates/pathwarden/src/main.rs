fn main() -> anyhow::Result<()> {
    pathwarden::cli::run()
}
