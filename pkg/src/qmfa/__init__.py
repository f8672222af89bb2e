"""Quantum multi-factor authentication built on HMP4 registers.

Simulated tokens, the challenge-response exchange, a line-based transport
and Monte Carlo attack experiments.
"""
from .authdb import AuthDatabase, TokenRecord
from .hmp4 import BitString4, Outcome, RegisterState, encode, hmp4_condition, measure
from .protocol import ClientSession, ProtocolParams, ServerConfig, ServerSession, run_handshake
from .token import QuantumToken

__version__ = "0.1.0"
