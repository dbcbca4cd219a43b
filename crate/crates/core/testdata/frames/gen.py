#!/usr/bin/env python3
"""Writes the golden frame fixtures from a standalone description of the
wire layout. Run from this directory; output is committed."""

import hashlib
import hmac
import struct


def field(b):
    return struct.pack(">I", len(b)) + b


def message(tag, *fields):
    return bytes([tag]) + b"".join(field(f) for f in fields)


def nonce_key(nonce):
    return hmac.new(b"stwa/nonce-key/v1", nonce, hashlib.sha256).digest()


def key_ref(key):
    return hashlib.sha256(b"stwa/key-ref/v1" + key).digest()[:8].hex().encode()


def transparent_sym(key, body):
    ref = key_ref(key)
    check = hmac.new(key, b"stwa/transparent-sym/v1" + ref + body, hashlib.sha256).digest()
    return bytes([0x01, 0x02]) + field(ref) + field(body) + field(check)


FRAMES = {
    "init_register.bin": message(0x01, b"M001", b"DMN-9", bytes(16), b"MFG-01"),
    "conn_reject_empty.bin": message(0x26, b""),
    "conn_notify.bin": message(0x22, b"bob", b"alice"),
    "init_token_sealed.bin": message(
        0x02,
        transparent_sym(
            nonce_key(bytes(16)),
            message(0x02, hashlib.sha256(b"MFG-010000000000").digest()),
        ),
    ),
}

if __name__ == "__main__":
    for name, data in FRAMES.items():
        with open(name, "wb") as f:
            f.write(data)
        print(name, len(data), data.hex())
