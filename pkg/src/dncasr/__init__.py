"""Joint neural speaker clustering and serialized-output ASR with linked decoders."""

__version__ = "0.1.0"
