//! Invariant checks driven by the fuzz targets and by the corpus replay
//! test. Each function accepts arbitrary bytes and panics only when an
//! invariant breaks.

use crate::audit::{AuditConfig, Auditor};
use crate::demo::ProvisionDemo;
use crate::devices::KeyFob;
use crate::keystore::{CarKeyId, KeyTable, StrongSource};
use crate::matrix::MatrixConfig;
use crate::scenario::Scenario;
use crate::trace::{parse_line, parse_trace};
use crate::wire::{Frame, Message};

/// Accepted frames re-encode to the same bytes and survive the typed view.
pub fn wire_decode(data: &[u8]) {
    if let Ok(frame) = Frame::decode(data) {
        assert_eq!(frame.encode(), data);
        let msg = Message::from(&frame);
        assert_eq!(msg.to_frame().expect("decoded message re-encodes"), frame);
    }
}

/// Parsing never panics; accepted records print back to an equal record
/// and the auditor digests whatever the parser accepts.
pub fn trace_parse(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(trace) = parse_trace(text) else { return };
    for (line, rec) in &trace.records {
        let again = parse_line(*line, &rec.to_string())
            .expect("printed record parses")
            .expect("printed record is not a comment");
        assert_eq!(&again, rec);
    }
    let config = AuditConfig::from_trace(&trace).unwrap_or_default();
    let _ = Auditor::audit(&trace, config).violations().len();
}

/// The three config parsers either accept or return field errors.
pub fn config_parse(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Err(e) = Scenario::parse(text) {
        assert!(!e.errors.is_empty());
    }
    if let Err(e) = MatrixConfig::parse(text) {
        assert!(!e.errors.is_empty());
    }
    if let Err(e) = ProvisionDemo::parse(text) {
        assert!(!e.errors.is_empty());
    }
}

/// Feeds a stream of wired frames to a fob. The input is a sequence of
/// `[flags, len, frame bytes...]` records; bit 0 of `flags` fails the
/// EEPROM write. The fob's table may only change on an acknowledged
/// commit, and every reply must encode.
pub fn prog_session(data: &[u8]) {
    let id = CarKeyId::new(0x0102_0304);
    let mut fob = KeyFob::new(id, KeyTable::zeroed(), Box::new(StrongSource::from_seed(0)));
    let mut rest = data;
    while rest.len() >= 2 {
        let (flags, len) = (rest[0], rest[1] as usize);
        rest = &rest[2..];
        let take = len.min(rest.len());
        let (bytes, tail) = rest.split_at(take);
        rest = tail;
        let Ok(frame) = Frame::decode(bytes) else { continue };
        let msg = Message::from(&frame);
        let before = fob.table().clone();
        let reply = fob.handle_prog(&msg, flags & 1 == 0);
        if let Some(r) = &reply {
            r.to_frame().expect("fob replies are schema-valid");
        }
        let committed = matches!(msg, Message::ProgCommit { .. })
            && matches!(reply, Some(Message::ProgAck(_)));
        if !committed {
            assert_eq!(fob.table(), &before, "table changed outside a commit");
        }
        assert_eq!(fob.id(), id);
    }
}
