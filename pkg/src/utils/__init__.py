# Shared utilities: configuration and the error hierarchy
