# Middleware package for CLI error handling
