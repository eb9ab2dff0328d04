"""Object placement via graph completion."""
