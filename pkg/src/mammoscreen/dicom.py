"""Minimal DICOM reader for mammogram pixel data.

Only the pieces the pipeline needs are handled: the Part 10 preamble and
file meta group, explicit VR little endian datasets, and PixelData stored
either natively or as a JPEG 2000 encapsulated fragment stream. Anything
else is rejected with a :class:`DicomError` subclass rather than guessed.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import MammoscreenError

Tag = tuple[int, int]

PREAMBLE_LENGTH = 128
MAGIC = b"DICM"

EXPLICIT_VR_LITTLE_ENDIAN = "1.2.840.10008.1.2.1"
IMPLICIT_VR_LITTLE_ENDIAN = "1.2.840.10008.1.2"
JPEG2000_SYNTAXES = frozenset(
    {
        "1.2.840.10008.1.2.4.90",  # JPEG 2000 lossless only
        "1.2.840.10008.1.2.4.91",  # JPEG 2000
        "1.2.840.10008.1.2.4.92",  # JPEG 2000 Part 2 multi-component lossless
        "1.2.840.10008.1.2.4.93",  # JPEG 2000 Part 2 multi-component
        "1.2.840.10008.1.2.4.201",  # HTJ2K lossless
        "1.2.840.10008.1.2.4.202",  # HTJ2K lossless RPCL
        "1.2.840.10008.1.2.4.203",  # HTJ2K
    }
)

TRANSFER_SYNTAX_UID: Tag = (0x0002, 0x0010)
PHOTOMETRIC_INTERPRETATION: Tag = (0x0028, 0x0004)
ROWS: Tag = (0x0028, 0x0010)
COLUMNS: Tag = (0x0028, 0x0011)
BITS_ALLOCATED: Tag = (0x0028, 0x0100)
BITS_STORED: Tag = (0x0028, 0x0101)
PIXEL_DATA: Tag = (0x7FE0, 0x0010)

REQUIRED_TAGS = (
    TRANSFER_SYNTAX_UID,
    PHOTOMETRIC_INTERPRETATION,
    ROWS,
    COLUMNS,
    BITS_ALLOCATED,
    BITS_STORED,
    PIXEL_DATA,
)

ITEM: Tag = (0xFFFE, 0xE000)
ITEM_DELIMITER: Tag = (0xFFFE, 0xE00D)
SEQUENCE_DELIMITER: Tag = (0xFFFE, 0xE0DD)

UNDEFINED_LENGTH = 0xFFFFFFFF

# VRs encoded with two reserved bytes and a 32-bit length.
LONG_VRS = frozenset({"OB", "OD", "OF", "OL", "OV", "OW", "SQ", "SV", "UC", "UN", "UR", "UT", "UV"})
SHORT_VRS = frozenset(
    {
        "AE", "AS", "AT", "CS", "DA", "DS", "DT", "FL", "FD", "IS", "LO", "LT",
        "PN", "SH", "SL", "SS", "ST", "TM", "UI", "UL", "US",
    }
)


class DicomError(MammoscreenError):
    """Base class for all DICOM parsing failures."""


class MissingMagic(DicomError):
    pass


class MissingRequiredTag(DicomError):
    def __init__(self, tag: Tag):
        super().__init__(f"missing required tag ({tag[0]:04X},{tag[1]:04X})")
        self.tag = tag


class UnsupportedVR(DicomError):
    pass


class UnsupportedTransferSyntax(DicomError):
    pass


class UnsupportedPixelFormat(DicomError):
    pass


class TruncatedElement(DicomError):
    pass


class MalformedElement(DicomError):
    pass


class MalformedEncapsulation(DicomError):
    pass


class PayloadSizeMismatch(DicomError):
    pass


class Photometric(str, enum.Enum):
    MONOCHROME1 = "MONOCHROME1"
    MONOCHROME2 = "MONOCHROME2"


class PayloadKind(str, enum.Enum):
    NATIVE = "Native"
    ENCAPSULATED = "Encapsulated"


@dataclass(frozen=True)
class DataElement:
    vr: str
    value: bytes


@dataclass(frozen=True)
class DicomObject:
    """Parsed DICOM file. Pixel bytes are kept exactly as stored."""

    transfer_syntax_uid: str
    photometric_interpretation: Photometric
    rows: int
    columns: int
    bits_allocated: int
    bits_stored: int
    pixel_payload: bytes
    payload_kind: PayloadKind
    extra_tags: Mapping[Tag, DataElement] = field(default_factory=dict)

    def __post_init__(self):
        if self.rows <= 0 or self.columns <= 0:
            raise UnsupportedPixelFormat(f"bad image size {self.rows}x{self.columns}")
        if self.bits_allocated not in (8, 16):
            raise UnsupportedPixelFormat(f"BitsAllocated={self.bits_allocated}")
        if not 1 <= self.bits_stored <= self.bits_allocated:
            raise UnsupportedPixelFormat(
                f"BitsStored={self.bits_stored} with BitsAllocated={self.bits_allocated}"
            )
        object.__setattr__(self, "extra_tags", MappingProxyType(dict(self.extra_tags)))

    @property
    def expected_native_length(self) -> int:
        return self.rows * self.columns * (self.bits_allocated // 8)

    def captured_elements(self) -> dict[Tag, DataElement]:
        """Every captured non-pixel element, required tags re-encoded as stored on disk."""
        out = dict(self.extra_tags)
        out[TRANSFER_SYNTAX_UID] = DataElement("UI", _pad(self.transfer_syntax_uid.encode(), b"\0"))
        out[PHOTOMETRIC_INTERPRETATION] = DataElement(
            "CS", _pad(self.photometric_interpretation.value.encode(), b" ")
        )
        out[ROWS] = DataElement("US", struct.pack("<H", self.rows))
        out[COLUMNS] = DataElement("US", struct.pack("<H", self.columns))
        out[BITS_ALLOCATED] = DataElement("US", struct.pack("<H", self.bits_allocated))
        out[BITS_STORED] = DataElement("US", struct.pack("<H", self.bits_stored))
        return out


@dataclass(frozen=True)
class PixelMatrix:
    """Raw integer pixel grid; ``values`` has shape ``(rows, columns)``."""

    values: np.ndarray
    bits_stored: int

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or 0 in values.shape:
            raise ValueError(f"pixel grid must be non-empty 2-D, got shape {values.shape}")
        if not np.issubdtype(values.dtype, np.integer):
            raise ValueError("pixel values must be integers")
        if values.min() < 0 or int(values.max()) >= 1 << self.bits_stored:
            raise ValueError(f"pixel values outside [0, 2^{self.bits_stored})")
        object.__setattr__(self, "values", values)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def columns(self) -> int:
        return self.values.shape[1]


def _pad(raw: bytes, pad: bytes) -> bytes:
    return raw + pad if len(raw) % 2 else raw


def _text(raw: bytes) -> str:
    return raw.decode("ascii", errors="replace").rstrip(" \0")


class _Reader:
    """Bounds-checked cursor over an explicit VR little endian byte stream."""

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int, what: str) -> bytes:
        if n > self.remaining:
            raise TruncatedElement(f"{what}: need {n} bytes at offset {self.pos}, have {self.remaining}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def tag(self) -> Tag:
        return struct.unpack("<HH", self.take(4, "tag"))

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def header(self) -> tuple[Tag, str | None, int]:
        """Read one element header; item and delimiter tags carry no VR."""
        tag = self.tag()
        if tag[0] == 0xFFFE:
            return tag, None, self.u32("item length")
        raw_vr = self.take(2, "VR")
        try:
            vr = raw_vr.decode("ascii")
        except UnicodeDecodeError:
            vr = ""
        if vr in LONG_VRS:
            self.take(2, "reserved bytes")
            length = self.u32("value length")
        elif vr in SHORT_VRS:
            length = struct.unpack("<H", self.take(2, "value length"))[0]
        else:
            raise UnsupportedVR(
                f"VR {raw_vr!r} for tag ({tag[0]:04X},{tag[1]:04X}) at offset {self.pos - 2}"
                " (implicit VR data is not supported)"
            )
        return tag, vr, length


def _skip_sequence(reader: _Reader) -> None:
    """Skip an undefined-length SQ value, recursing into undefined-length items."""
    while True:
        tag, _, length = reader.header()
        if tag == SEQUENCE_DELIMITER:
            return
        if tag != ITEM:
            raise MalformedElement(f"expected item in sequence at offset {reader.pos - 8}")
        if length != UNDEFINED_LENGTH:
            reader.take(length, "sequence item")
            continue
        while True:
            tag, vr, length = reader.header()
            if tag == ITEM_DELIMITER:
                break
            _skip_value(reader, tag, vr, length)


def _skip_value(reader: _Reader, tag: Tag, vr: str | None, length: int) -> None:
    if length != UNDEFINED_LENGTH:
        reader.take(length, f"value of ({tag[0]:04X},{tag[1]:04X})")
    elif vr == "SQ":
        _skip_sequence(reader)
    else:
        raise MalformedElement(f"undefined length on non-sequence ({tag[0]:04X},{tag[1]:04X})")


def _scan_encapsulated(reader: _Reader) -> bytes:
    """Return the raw item stream of encapsulated PixelData, delimiter included.

    A non-item tag inside the stream means the rest of the buffer cannot be
    delimited; everything left is returned and fragment parsing reports it.
    """
    start = reader.pos
    while True:
        if reader.remaining < 8:
            raise TruncatedElement("encapsulated pixel data ends without a sequence delimiter")
        tag = struct.unpack_from("<HH", reader.data, reader.pos)
        if tag == SEQUENCE_DELIMITER:
            reader.take(8, "sequence delimiter")
            return reader.data[start : reader.pos]
        if tag != ITEM:
            reader.pos = len(reader.data)
            return reader.data[start:]
        reader.take(4, "item tag")
        reader.take(reader.u32("item length"), "pixel data fragment")


def parse_dicom(data: bytes) -> DicomObject:
    """Parse a Part 10 file. Pixel bytes are captured but not interpreted."""
    data = bytes(data)
    if len(data) < PREAMBLE_LENGTH + 4 or data[PREAMBLE_LENGTH : PREAMBLE_LENGTH + 4] != MAGIC:
        raise MissingMagic("no 'DICM' marker after the 128-byte preamble")
    reader = _Reader(data, PREAMBLE_LENGTH + 4)

    elements: dict[Tag, DataElement] = {}
    pixel_payload: bytes | None = None
    transfer_syntax: str | None = None

    while reader.remaining > 0:
        tag, vr, length = reader.header()
        if vr is None:
            raise MalformedElement(f"stray item tag ({tag[0]:04X},{tag[1]:04X}) at top level")
        if tag[0] != 0x0002 and transfer_syntax is None:
            if TRANSFER_SYNTAX_UID not in elements:
                raise MissingRequiredTag(TRANSFER_SYNTAX_UID)
            transfer_syntax = _text(elements[TRANSFER_SYNTAX_UID].value)
            _check_transfer_syntax(transfer_syntax)
        if tag == PIXEL_DATA:
            encapsulated = transfer_syntax in JPEG2000_SYNTAXES
            if encapsulated != (length == UNDEFINED_LENGTH):
                raise MalformedElement(
                    f"PixelData length {'undefined' if length == UNDEFINED_LENGTH else length}"
                    f" inconsistent with transfer syntax {transfer_syntax}"
                )
            if encapsulated:
                pixel_payload = _scan_encapsulated(reader)
            else:
                pixel_payload = reader.take(length, "PixelData")
            continue
        if vr == "SQ" or length == UNDEFINED_LENGTH:
            _skip_value(reader, tag, vr, length)
            continue
        elements[tag] = DataElement(vr, reader.take(length, f"value of ({tag[0]:04X},{tag[1]:04X})"))

    if transfer_syntax is None:
        # File with a meta group only.
        if TRANSFER_SYNTAX_UID not in elements:
            raise MissingRequiredTag(TRANSFER_SYNTAX_UID)
        transfer_syntax = _text(elements[TRANSFER_SYNTAX_UID].value)
        _check_transfer_syntax(transfer_syntax)
    for tag in REQUIRED_TAGS:
        if tag == PIXEL_DATA:
            if pixel_payload is None:
                raise MissingRequiredTag(tag)
        elif tag not in elements:
            raise MissingRequiredTag(tag)

    photometric = _text(elements[PHOTOMETRIC_INTERPRETATION].value)
    try:
        photometric_kind = Photometric(photometric)
    except ValueError:
        raise UnsupportedPixelFormat(f"photometric interpretation {photometric!r}") from None

    obj = DicomObject(
        transfer_syntax_uid=transfer_syntax,
        photometric_interpretation=photometric_kind,
        rows=_us(elements[ROWS]),
        columns=_us(elements[COLUMNS]),
        bits_allocated=_us(elements[BITS_ALLOCATED]),
        bits_stored=_us(elements[BITS_STORED]),
        pixel_payload=pixel_payload,
        payload_kind=PayloadKind.ENCAPSULATED
        if transfer_syntax in JPEG2000_SYNTAXES
        else PayloadKind.NATIVE,
        extra_tags={t: e for t, e in elements.items() if t not in REQUIRED_TAGS},
    )
    if obj.payload_kind is PayloadKind.NATIVE:
        expected = obj.expected_native_length
        payload = obj.pixel_payload
        # Odd-length values carry one pad byte on disk.
        if expected % 2 and len(payload) == expected + 1:
            object.__setattr__(obj, "pixel_payload", payload[:expected])
        elif len(payload) != expected:
            raise PayloadSizeMismatch(f"PixelData has {len(payload)} bytes, expected {expected}")
    return obj


def _check_transfer_syntax(uid: str) -> None:
    if uid == IMPLICIT_VR_LITTLE_ENDIAN:
        raise UnsupportedTransferSyntax("implicit VR little endian is not supported")
    if uid != EXPLICIT_VR_LITTLE_ENDIAN and uid not in JPEG2000_SYNTAXES:
        raise UnsupportedTransferSyntax(f"transfer syntax {uid!r} is not supported")


def _us(element: DataElement) -> int:
    if element.vr not in ("US", "SS") or len(element.value) < 2:
        raise MalformedElement(f"expected a 16-bit value, got VR {element.vr} of {len(element.value)} bytes")
    return struct.unpack_from("<H", element.value)[0]


def _fragments(stream: bytes) -> tuple[list[int], list[tuple[int, bytes]]]:
    """Split an encapsulated item stream into (offset table, [(offset, fragment)])."""
    reader = _Reader(stream)
    try:
        tag, _, length = reader.header()
        if tag != ITEM or length == UNDEFINED_LENGTH or length % 4:
            raise MalformedEncapsulation("PixelData does not start with a basic offset table item")
        table = reader.take(length, "basic offset table")
        offsets = list(struct.unpack(f"<{length // 4}I", table))
        first = reader.pos
        fragments: list[tuple[int, bytes]] = []
        while True:
            position = reader.pos
            tag = reader.tag()
            if tag == SEQUENCE_DELIMITER:
                break
            if tag != ITEM:
                raise MalformedEncapsulation(
                    f"expected fragment item, found ({tag[0]:04X},{tag[1]:04X}) at offset {position}"
                )
            length = reader.u32("fragment length")
            if length == UNDEFINED_LENGTH:
                raise MalformedEncapsulation("fragment with undefined length")
            fragments.append((position - first, reader.take(length, "fragment")))
    except TruncatedElement as exc:
        raise MalformedEncapsulation(f"fragment stream truncated: {exc}") from None
    except UnsupportedVR as exc:
        raise MalformedEncapsulation(str(exc)) from None
    if not fragments:
        raise MalformedEncapsulation("no pixel data fragments")
    return offsets, fragments


def extract_pixel_payload(obj: DicomObject) -> tuple[bytes, PayloadKind]:
    """Native: raw pixel bytes. Encapsulated: the first frame's codestream."""
    if obj.payload_kind is PayloadKind.NATIVE:
        return obj.pixel_payload, obj.payload_kind
    offsets, fragments = _fragments(obj.pixel_payload)
    if len(offsets) > 1:
        frame = [chunk for offset, chunk in fragments if offset < offsets[1]]
    else:
        frame = [chunk for _, chunk in fragments]
    return b"".join(frame), obj.payload_kind


def decode_native_pixels(obj: DicomObject) -> PixelMatrix:
    if obj.payload_kind is not PayloadKind.NATIVE:
        raise UnsupportedPixelFormat("encapsulated pixel data needs an external decoder")
    expected = obj.expected_native_length
    if len(obj.pixel_payload) != expected:
        raise PayloadSizeMismatch(f"PixelData has {len(obj.pixel_payload)} bytes, expected {expected}")
    dtype = np.dtype("<u2") if obj.bits_allocated == 16 else np.dtype("u1")
    values = np.frombuffer(obj.pixel_payload, dtype=dtype).reshape(obj.rows, obj.columns)
    mask = (1 << obj.bits_stored) - 1
    return PixelMatrix(values=(values & mask).astype(dtype.newbyteorder("=")), bits_stored=obj.bits_stored)


def read_dicom(path) -> DicomObject:
    with open(path, "rb") as fh:
        return parse_dicom(fh.read())
