from crydet.audio.cryf import (
    BagRecord,
    decode_features,
    encode_features,
    read_bags,
    read_features,
    write_bags,
    write_features,
)
from crydet.audio.manifest import DatasetManifest, ManifestEntry, load_manifest, write_manifest
from crydet.audio.mel import (
    BLAZENET_1S,
    BLAZENET_5S,
    EMBEDDING_1S,
    PROFILES,
    MelProfile,
    Spectrogram,
    hz_to_mel,
    log_mel,
    mel_filterbank,
    mel_to_hz,
)
from crydet.audio.wav import AudioClip, decode_wav, encode_wav, frame_clip, read_wav, resample, write_wav

__all__ = [
    "AudioClip", "BagRecord", "BLAZENET_1S", "BLAZENET_5S", "DatasetManifest", "EMBEDDING_1S",
    "ManifestEntry", "MelProfile", "PROFILES", "Spectrogram", "decode_features", "decode_wav",
    "encode_features", "encode_wav", "frame_clip", "hz_to_mel", "load_manifest", "log_mel",
    "mel_filterbank", "mel_to_hz", "read_bags", "read_features", "read_wav", "resample",
    "write_bags", "write_features", "write_manifest", "write_wav",
]
