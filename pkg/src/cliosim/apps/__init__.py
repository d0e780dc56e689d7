"""Reference services built on the client API."""
