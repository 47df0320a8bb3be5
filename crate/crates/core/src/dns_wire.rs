//! Minimal DNS wire codec (RFC 1035 layout).
//!
//! Covers what a forwarding firewall needs: parsing the single-question
//! query, reading response headers without touching answer bodies, and
//! building the locally synthesized responses (NXDOMAIN, sinkhole A record,
//! SERVFAIL, FORMERR). Compression pointers are accepted on input but
//! never emitted.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER_LEN: usize = 12;
pub const MAX_LABEL_LEN: usize = 63;
pub const MAX_NAME_LEN: usize = 253;
pub const MAX_MESSAGE_LEN: usize = 4096;

pub const TYPE_A: u16 = 1;
pub const TYPE_AAAA: u16 = 28;
pub const CLASS_IN: u16 = 1;

pub const RCODE_NOERROR: u8 = 0;
pub const RCODE_FORMERR: u8 = 1;
pub const RCODE_SERVFAIL: u8 = 2;
pub const RCODE_NXDOMAIN: u8 = 3;

pub const DEFAULT_SINKHOLE_TTL: u32 = 60;

const FLAG_QR: u16 = 0x8000;
const FLAG_RD: u16 = 0x0100;
const FLAG_RA: u16 = 0x0080;
const OPCODE_MASK: u16 = 0x7800;
const RCODE_MASK: u16 = 0x000f;

// Bound on pointer hops; every hop must also move strictly backwards.
const MAX_POINTER_HOPS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("message truncated at offset {0}")]
    Truncated(usize),
    #[error("bad label: {0}")]
    BadLabel(String),
    #[error("compression pointer loop or forward pointer at offset {0}")]
    PointerLoop(usize),
    #[error("QR bit set, not a query")]
    NotAQuery,
    #[error("expected exactly one question, found {0}")]
    MultiQuestion(u16),
}

impl WireError {
    pub fn code(&self) -> &'static str {
        match self {
            WireError::Truncated(_) => "TRUNCATED",
            WireError::BadLabel(_) => "BAD_LABEL",
            WireError::PointerLoop(_) => "POINTER_LOOP",
            WireError::NotAQuery => "NOT_A_QUERY",
            WireError::MultiQuestion(_) => "MULTI_QUESTION",
        }
    }
}

/// A case-normalized domain name. The root is the empty label list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct DomainName {
    labels: Vec<String>,
}

fn valid_label_byte(b: u8) -> bool {
    b.is_ascii_graphic() && b != b'.'
}

impl DomainName {
    pub fn root() -> Self {
        DomainName { labels: Vec::new() }
    }

    /// Builds a name from raw labels, lowercasing and validating each.
    pub fn from_labels<I, S>(labels: I) -> Result<Self, WireError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let mut out = Vec::new();
        let mut presentation_len = 0usize;
        for raw in labels {
            let raw = raw.as_ref();
            if raw.is_empty() {
                return Err(WireError::BadLabel("empty label".into()));
            }
            if raw.len() > MAX_LABEL_LEN {
                return Err(WireError::BadLabel(format!(
                    "label of {} bytes exceeds {MAX_LABEL_LEN}",
                    raw.len()
                )));
            }
            if let Some(b) = raw.iter().find(|b| !valid_label_byte(**b)) {
                return Err(WireError::BadLabel(format!("invalid byte 0x{b:02x} in label")));
            }
            presentation_len += raw.len() + usize::from(!out.is_empty());
            if presentation_len > MAX_NAME_LEN {
                return Err(WireError::BadLabel(format!("name exceeds {MAX_NAME_LEN} bytes")));
            }
            // valid_label_byte guarantees ASCII
            out.push(String::from_utf8_lossy(raw).to_ascii_lowercase());
        }
        Ok(DomainName { labels: out })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    pub fn is_root(&self) -> bool {
        self.labels.is_empty()
    }

    /// Length of the presentation form without the trailing dot.
    pub fn presentation_len(&self) -> usize {
        if self.labels.is_empty() {
            return 0;
        }
        self.labels.iter().map(|l| l.len()).sum::<usize>() + self.labels.len() - 1
    }

    /// True when `suffix` equals this name or is a label-boundary suffix of it.
    pub fn is_subdomain_of(&self, suffix: &DomainName) -> bool {
        suffix.labels.len() <= self.labels.len()
            && self.labels[self.labels.len() - suffix.labels.len()..] == suffix.labels[..]
    }

    pub fn wire_len(&self) -> usize {
        self.labels.iter().map(|l| l.len() + 1).sum::<usize>() + 1
    }

    pub fn write_wire(&self, out: &mut Vec<u8>) {
        for label in &self.labels {
            out.push(label.len() as u8);
            out.extend_from_slice(label.as_bytes());
        }
        out.push(0);
    }
}

impl FromStr for DomainName {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.strip_suffix('.').unwrap_or(s);
        if trimmed.is_empty() {
            return if s == "." {
                Ok(DomainName::root())
            } else {
                Err(WireError::BadLabel("empty name".into()))
            };
        }
        DomainName::from_labels(trimmed.split('.'))
    }
}

impl fmt::Display for DomainName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.labels.is_empty() {
            return f.write_str(".");
        }
        f.write_str(&self.labels.join("."))
    }
}

impl Serialize for DomainName {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DomainName {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The single question of a query plus the header fields the firewall uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryView {
    pub id: u16,
    pub qname: DomainName,
    pub qtype: u16,
    pub qclass: u16,
    pub recursion_desired: bool,
}

impl QueryView {
    pub fn new(id: u16, qname: DomainName, qtype: u16) -> Self {
        QueryView { id, qname, qtype, qclass: CLASS_IN, recursion_desired: true }
    }

    fn question_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.qname.wire_len() + 4);
        self.qname.write_wire(&mut out);
        out.extend_from_slice(&self.qtype.to_be_bytes());
        out.extend_from_slice(&self.qclass.to_be_bytes());
        out
    }

    fn request_flags(&self) -> u16 {
        if self.recursion_desired {
            FLAG_RD
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponseMeta {
    pub id: u16,
    pub rcode: u8,
    pub answer_count: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockMode {
    #[default]
    Nxdomain,
    Sinkhole,
}

impl FromStr for BlockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nxdomain" => Ok(BlockMode::Nxdomain),
            "sinkhole" => Ok(BlockMode::Sinkhole),
            other => Err(format!("unknown block mode `{other}`")),
        }
    }
}

/// A parsed query that still borrows the original datagram, so responses can
/// echo the question section byte-for-byte (including the client's casing).
#[derive(Debug, Clone)]
pub struct ParsedQuery<'a> {
    pub view: QueryView,
    flags: u16,
    question: &'a [u8],
}

impl ParsedQuery<'_> {
    pub fn question_bytes(&self) -> &[u8] {
        self.question
    }

    pub fn block_response(&self, mode: BlockMode, sinkhole: Option<Ipv4Addr>, ttl: u32) -> Vec<u8> {
        block_response(self.view.id, self.flags, self.question, self.view.qtype, mode, sinkhole, ttl)
    }

    pub fn servfail(&self) -> Vec<u8> {
        build_response(self.view.id, self.flags, RCODE_SERVFAIL, Some(self.question), None)
    }
}

fn read_u16(buf: &[u8], at: usize) -> Result<u16, WireError> {
    buf.get(at..at + 2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .ok_or(WireError::Truncated(buf.len()))
}

/// Reads a possibly-compressed name starting at `start`, returning the name and
/// the offset just past its in-place encoding.
fn read_name(buf: &[u8], start: usize) -> Result<(DomainName, usize), WireError> {
    let mut labels: Vec<&[u8]> = Vec::new();
    let mut pos = start;
    let mut end = None;
    let mut hops = 0usize;
    let mut wire_len = 1usize;
    loop {
        let len = *buf.get(pos).ok_or(WireError::Truncated(buf.len()))?;
        match len & 0xc0 {
            0x00 => {
                if len == 0 {
                    pos += 1;
                    break;
                }
                let len = len as usize;
                let label = buf
                    .get(pos + 1..pos + 1 + len)
                    .ok_or(WireError::Truncated(buf.len()))?;
                wire_len += len + 1;
                if wire_len > MAX_NAME_LEN + 2 {
                    return Err(WireError::BadLabel(format!("name exceeds {MAX_NAME_LEN} bytes")));
                }
                labels.push(label);
                pos += 1 + len;
            }
            0xc0 => {
                let target = (read_u16(buf, pos)? & 0x3fff) as usize;
                if target >= pos || hops >= MAX_POINTER_HOPS {
                    return Err(WireError::PointerLoop(pos));
                }
                hops += 1;
                if end.is_none() {
                    end = Some(pos + 2);
                }
                pos = target;
            }
            _ => return Err(WireError::BadLabel(format!("reserved label type 0x{len:02x}"))),
        }
    }
    let name = DomainName::from_labels(labels)?;
    Ok((name, end.unwrap_or(pos)))
}

/// Parses a query, keeping a borrow of the raw question section.
pub fn parse_query_raw(bytes: &[u8]) -> Result<ParsedQuery<'_>, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated(bytes.len()));
    }
    let id = read_u16(bytes, 0)?;
    let flags = read_u16(bytes, 2)?;
    if flags & FLAG_QR != 0 {
        return Err(WireError::NotAQuery);
    }
    let qdcount = read_u16(bytes, 4)?;
    if qdcount != 1 {
        return Err(WireError::MultiQuestion(qdcount));
    }
    let (qname, after_name) = read_name(bytes, HEADER_LEN)?;
    let qtype = read_u16(bytes, after_name)?;
    let qclass = read_u16(bytes, after_name + 2)?;
    let view = QueryView {
        id,
        qname,
        qtype,
        qclass,
        recursion_desired: flags & FLAG_RD != 0,
    };
    Ok(ParsedQuery { view, flags, question: &bytes[HEADER_LEN..after_name + 4] })
}

pub fn parse_query(bytes: &[u8]) -> Result<QueryView, WireError> {
    parse_query_raw(bytes).map(|p| p.view)
}

/// Canonical, uncompressed encoding of a single-question query.
pub fn encode_query(q: &QueryView) -> Vec<u8> {
    let question = q.question_bytes();
    let mut out = Vec::with_capacity(HEADER_LEN + question.len());
    out.extend_from_slice(&q.id.to_be_bytes());
    out.extend_from_slice(&q.request_flags().to_be_bytes());
    out.extend_from_slice(&[0, 1, 0, 0, 0, 0, 0, 0]);
    out.extend_from_slice(&question);
    out
}

pub fn parse_response_meta(bytes: &[u8]) -> Result<ResponseMeta, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated(bytes.len()));
    }
    let flags = read_u16(bytes, 2)?;
    Ok(ResponseMeta {
        id: read_u16(bytes, 0)?,
        rcode: (flags & RCODE_MASK) as u8,
        answer_count: read_u16(bytes, 6)?,
    })
}

fn build_response(
    id: u16,
    request_flags: u16,
    rcode: u8,
    question: Option<&[u8]>,
    answer: Option<(Ipv4Addr, u32)>,
) -> Vec<u8> {
    let flags = FLAG_QR | (request_flags & (OPCODE_MASK | FLAG_RD)) | FLAG_RA | u16::from(rcode & 0x0f);
    let qdcount = u16::from(question.is_some());
    let ancount = u16::from(answer.is_some());
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&id.to_be_bytes());
    out.extend_from_slice(&flags.to_be_bytes());
    out.extend_from_slice(&qdcount.to_be_bytes());
    out.extend_from_slice(&ancount.to_be_bytes());
    out.extend_from_slice(&[0, 0, 0, 0]);
    if let Some(q) = question {
        out.extend_from_slice(q);
    }
    if let Some((addr, ttl)) = answer {
        // name is a pointer to the question name at offset 12
        out.extend_from_slice(&[0xc0, 0x0c]);
        out.extend_from_slice(&TYPE_A.to_be_bytes());
        out.extend_from_slice(&CLASS_IN.to_be_bytes());
        out.extend_from_slice(&ttl.to_be_bytes());
        out.extend_from_slice(&4u16.to_be_bytes());
        out.extend_from_slice(&addr.octets());
    }
    out
}

fn block_response(
    id: u16,
    flags: u16,
    question: &[u8],
    qtype: u16,
    mode: BlockMode,
    sinkhole: Option<Ipv4Addr>,
    ttl: u32,
) -> Vec<u8> {
    match (mode, sinkhole) {
        (BlockMode::Sinkhole, Some(addr)) if qtype == TYPE_A => {
            build_response(id, flags, RCODE_NOERROR, Some(question), Some((addr, ttl)))
        }
        _ => build_response(id, flags, RCODE_NXDOMAIN, Some(question), None),
    }
}

/// Builds the locally answered response for a blocked query. Sinkhole mode
/// answers A queries only; every other case degrades to NXDOMAIN.
pub fn synthesize_block_response(q: &QueryView, mode: BlockMode, sinkhole: Option<Ipv4Addr>) -> Vec<u8> {
    synthesize_block_response_ttl(q, mode, sinkhole, DEFAULT_SINKHOLE_TTL)
}

pub fn synthesize_block_response_ttl(
    q: &QueryView,
    mode: BlockMode,
    sinkhole: Option<Ipv4Addr>,
    ttl: u32,
) -> Vec<u8> {
    let question = q.question_bytes();
    block_response(q.id, q.request_flags(), &question, q.qtype, mode, sinkhole, ttl)
}

/// A response carrying `rcode`, echoing the question, with no answers.
pub fn synthesize_response(q: &QueryView, rcode: u8) -> Vec<u8> {
    build_response(q.id, q.request_flags(), rcode, Some(&q.question_bytes()), None)
}

/// FORMERR for a datagram whose header is intact but whose body is not.
/// Returns `None` when no transaction id can be recovered.
pub fn formerr_for(raw: &[u8]) -> Option<Vec<u8>> {
    if raw.len() < HEADER_LEN {
        return None;
    }
    let id = u16::from_be_bytes([raw[0], raw[1]]);
    let flags = u16::from_be_bytes([raw[2], raw[3]]);
    Some(build_response(id, flags, RCODE_FORMERR, None, None))
}

/// Transaction id of any datagram with at least two bytes.
pub fn peek_id(raw: &[u8]) -> Option<u16> {
    raw.get(0..2).map(|b| u16::from_be_bytes([b[0], b[1]]))
}
