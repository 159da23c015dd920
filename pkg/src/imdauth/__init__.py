"""Authentication stack for an inductively powered implant: PSK transport
handshake, tap-pattern second factor, device/server state machines and a
deterministic simulator for energy, latency and adversary experiments."""

__version__ = "0.1.0"
