"""Control plane: task admission, agent protocol, device registry, event stream."""
