# Subcommand registration for the etcseg CLI
