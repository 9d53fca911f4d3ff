"""voipstego: a simulation lab for covert channels in VoIP calls.

Streams of RTP/RTCP packets are generated for a codec, covert channels embed
framed bits into header fields, authentication tags, report blocks, audio
samples and deliberately late packets (LACK), a seeded network carries them,
and the receiver side extracts and checks what got through.
"""
__version__ = "0.1.0"
