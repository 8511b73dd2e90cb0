//! Linux 802.11n CSI Tool capture records (`.dat` files).
//!
//! A capture is a sequence of fields: a 2-byte big-endian length (counting
//! the code byte), a 1-byte code, then `length - 1` body bytes. Code
//! `0xBB` carries a beamforming feedback report whose 20-byte header is
//! followed by bit-packed CSI.

use tracing::warn;

use super::{CsiError, CsiFrame, Result, SUBCARRIERS};

pub const BFEE_CODE: u8 = 0xBB;
const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BfeeRecord {
    pub timestamp_low: u32,
    pub bfee_count: u16,
    pub n_rx: u8,
    pub n_tx: u8,
    pub rssi_a: u8,
    pub rssi_b: u8,
    pub rssi_c: u8,
    pub noise: i8,
    pub agc: u8,
    pub antenna_sel: u8,
    pub rate: u16,
    pub payload: Vec<u8>,
}

/// Payload size in bytes for the given antenna counts: per subcarrier a
/// 3-bit skip plus 16 bits per link.
pub fn payload_len(n_rx: u8, n_tx: u8) -> usize {
    let links = n_rx as usize * n_tx as usize;
    (SUBCARRIERS * (links * 16 + 3)).div_ceil(8)
}

/// Outcome of parsing a capture stream. Parsing never fails outright; the
/// counters and `error` say what was dropped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParseReport {
    pub records: Vec<BfeeRecord>,
    /// Fields with a code other than `0xBB`.
    pub skipped: usize,
    /// `0xBB` fields whose header or payload size was inconsistent.
    pub invalid: usize,
    /// Trailing bytes that did not form a complete field.
    pub truncated: usize,
    pub error: Option<String>,
}

pub fn parse_dat_stream(bytes: &[u8]) -> ParseReport {
    let mut report = ParseReport::default();
    let mut pos = 0;
    while pos < bytes.len() {
        let rest = &bytes[pos..];
        if rest.len() < 3 {
            report.truncated += 1;
            warn!(
                offset = pos,
                bytes = rest.len(),
                "truncated trailing field header"
            );
            break;
        }
        let field_len = u16::from_be_bytes([rest[0], rest[1]]) as usize;
        if field_len == 0 {
            report.error = Some(format!("zero field length at offset {pos}"));
            report.invalid += 1;
            break;
        }
        if 2 + field_len > rest.len() {
            report.truncated += 1;
            let msg = format!(
                "field at offset {pos} declares {field_len} bytes, {} remain",
                rest.len() - 2
            );
            warn!("{msg}");
            report.error = Some(msg);
            break;
        }
        let code = rest[2];
        let body = &rest[3..2 + field_len];
        pos += 2 + field_len;
        if code != BFEE_CODE {
            report.skipped += 1;
            continue;
        }
        match parse_bfee_body(body) {
            Ok(r) => report.records.push(r),
            Err(e) => {
                warn!(offset = pos, "invalid bfee record: {e}");
                report.invalid += 1;
            }
        }
    }
    report
}

fn parse_bfee_body(b: &[u8]) -> Result<BfeeRecord> {
    if b.len() < HEADER_LEN {
        return Err(CsiError::InvalidRecord(format!(
            "body of {} bytes is shorter than the header",
            b.len()
        )));
    }
    let n_rx = b[8];
    let n_tx = b[9];
    if !(1..=3).contains(&n_rx) || !(1..=3).contains(&n_tx) {
        return Err(CsiError::InvalidRecord(format!(
            "antenna counts n_rx={n_rx} n_tx={n_tx}"
        )));
    }
    let len = u16::from_le_bytes([b[16], b[17]]) as usize;
    let expected = payload_len(n_rx, n_tx);
    if len != expected || b.len() != HEADER_LEN + len {
        return Err(CsiError::InvalidRecord(format!(
            "payload length {len} (body {}), expected {expected} for {n_rx}x{n_tx}",
            b.len() - HEADER_LEN
        )));
    }
    Ok(BfeeRecord {
        timestamp_low: u32::from_le_bytes([b[0], b[1], b[2], b[3]]),
        bfee_count: u16::from_le_bytes([b[4], b[5]]),
        n_rx,
        n_tx,
        rssi_a: b[10],
        rssi_b: b[11],
        rssi_c: b[12],
        noise: b[13] as i8,
        agc: b[14],
        antenna_sel: b[15],
        rate: u16::from_le_bytes([b[18], b[19]]),
        payload: b[HEADER_LEN..].to_vec(),
    })
}

/// Frames a record as one `0xBB` capture field.
pub fn encode_bfee(r: &BfeeRecord) -> Vec<u8> {
    let field_len = 1 + HEADER_LEN + r.payload.len();
    let mut out = Vec::with_capacity(2 + field_len);
    out.extend_from_slice(&(field_len as u16).to_be_bytes());
    out.push(BFEE_CODE);
    out.extend_from_slice(&r.timestamp_low.to_le_bytes());
    out.extend_from_slice(&r.bfee_count.to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&[
        r.n_rx,
        r.n_tx,
        r.rssi_a,
        r.rssi_b,
        r.rssi_c,
        r.noise as u8,
        r.agc,
        r.antenna_sel,
    ]);
    out.extend_from_slice(&(r.payload.len() as u16).to_le_bytes());
    out.extend_from_slice(&r.rate.to_le_bytes());
    out.extend_from_slice(&r.payload);
    out
}

/// Receive-antenna permutation: raw slot `r` holds antenna `perm[r]`.
/// Selections that are not a permutation of `0..n_rx` fall back to
/// identity.
pub fn rx_permutation(n_rx: u8, antenna_sel: u8) -> Vec<usize> {
    let n = n_rx as usize;
    let perm: Vec<usize> = (0..n)
        .map(|r| ((antenna_sel >> (2 * r)) & 0x3) as usize)
        .collect();
    let mut seen = [false; 4];
    for &p in &perm {
        if p >= n || seen[p] {
            return (0..n).collect();
        }
        seen[p] = true;
    }
    perm
}

fn read_i8(payload: &[u8], bit: usize) -> i8 {
    let (byte, rem) = (bit / 8, bit % 8);
    let lo = payload[byte] >> rem;
    let hi = if rem == 0 {
        0
    } else {
        payload[byte + 1] << (8 - rem)
    };
    (lo | hi) as i8
}

fn write_i8(payload: &mut [u8], bit: usize, v: i8) {
    let v = v as u8;
    let (byte, rem) = (bit / 8, bit % 8);
    payload[byte] = (payload[byte] & !(0xFFu8 << rem)) | (v << rem);
    if rem != 0 {
        let mask = 0xFFu8 >> (8 - rem);
        payload[byte + 1] = (payload[byte + 1] & !mask) | (v >> (8 - rem));
    }
}

/// Unpacks the bit-packed CSI of one record.
pub fn decode_bfee(r: &BfeeRecord, receiver_id: usize) -> Result<CsiFrame> {
    let (n_rx, n_tx) = (r.n_rx as usize, r.n_tx as usize);
    if !(1..=3).contains(&n_rx) || !(1..=3).contains(&n_tx) {
        return Err(CsiError::InvalidRecord(format!(
            "antenna counts {n_rx}x{n_tx}"
        )));
    }
    let links = n_rx * n_tx;
    let bits_needed = SUBCARRIERS * (3 + 16 * links);
    if bits_needed > 8 * r.payload.len() {
        return Err(CsiError::InvalidRecord(format!(
            "payload of {} bytes holds {} bits, {bits_needed} needed",
            r.payload.len(),
            8 * r.payload.len()
        )));
    }
    let perm = rx_permutation(r.n_rx, r.antenna_sel);
    let mut frame = CsiFrame::zeros(n_rx, n_tx, r.timestamp_low, receiver_id);
    let mut bit = 0;
    for sc in 0..SUBCARRIERS {
        bit += 3;
        for j in 0..links {
            let re = read_i8(&r.payload, bit);
            let im = read_i8(&r.payload, bit + 8);
            bit += 16;
            let (tx, slot) = (j % n_tx, j / n_tx);
            frame.set(sc, perm[slot], tx, [re, im]);
        }
    }
    Ok(frame)
}

/// Packs a frame into a payload that [`decode_bfee`] reads back exactly
/// under the same `antenna_sel`. Skip bits are written as zero.
pub fn pack_csi(frame: &CsiFrame, antenna_sel: u8) -> Vec<u8> {
    let (n_rx, n_tx) = (frame.n_rx, frame.n_tx);
    let perm = rx_permutation(n_rx as u8, antenna_sel);
    let mut payload = vec![0u8; payload_len(n_rx as u8, n_tx as u8)];
    let mut bit = 0;
    for sc in 0..SUBCARRIERS {
        bit += 3;
        for j in 0..n_rx * n_tx {
            let (tx, slot) = (j % n_tx, j / n_tx);
            let [re, im] = frame.get(sc, perm[slot], tx);
            write_i8(&mut payload, bit, re);
            write_i8(&mut payload, bit + 8, im);
            bit += 16;
        }
    }
    payload
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(n_rx: u8, n_tx: u8, payload: Vec<u8>) -> BfeeRecord {
        BfeeRecord {
            timestamp_low: 0xDEADBEEF,
            bfee_count: 513,
            n_rx,
            n_tx,
            rssi_a: 40,
            rssi_b: 41,
            rssi_c: 42,
            noise: -92,
            agc: 30,
            antenna_sel: 0b10_01_00,
            rate: 0x1234,
            payload,
        }
    }

    #[test]
    fn payload_sizes() {
        assert_eq!(payload_len(3, 3), 30 * (9 * 16 + 3) / 8 + 1);
        assert_eq!(payload_len(1, 1), (30 * 19 + 7) / 8);
    }

    #[test]
    fn empty_and_foreign_fields() {
        assert_eq!(parse_dat_stream(&[]), ParseReport::default());
        let r = parse_dat_stream(&[0, 3, 0xC1, 7, 7]);
        assert!(r.records.is_empty());
        assert_eq!(r.skipped, 1);
        assert!(r.error.is_none());
    }

    #[test]
    fn record_round_trip() {
        let payload: Vec<u8> = (0..payload_len(3, 3))
            .map(|i| (i * 37 % 251) as u8)
            .collect();
        let rec = record(3, 3, payload);
        let r = parse_dat_stream(&encode_bfee(&rec));
        assert_eq!(r.records, vec![rec]);
    }

    #[test]
    fn hand_packed_value() {
        // subcarrier 0, link (0,0): 3 skip bits then real=3, imag=-4
        let mut payload = vec![0u8; payload_len(1, 1)];
        let re = 3u8;
        let im = (-4i8) as u8;
        payload[0] = re << 3;
        payload[1] = (re >> 5) | (im << 3);
        payload[2] = im >> 5;
        let mut rec = record(1, 1, payload);
        rec.antenna_sel = 0;
        let f = decode_bfee(&rec, 0).unwrap();
        assert_eq!(f.get(0, 0, 0), [3, -4]);
        assert_eq!(f.get(1, 0, 0), [0, 0]);
    }

    #[test]
    fn zero_payload_decodes_to_zero() {
        let rec = record(3, 3, vec![0; payload_len(3, 3)]);
        let f = decode_bfee(&rec, 1).unwrap();
        assert!(f.values.iter().all(|v| *v == [0, 0]));
        assert_eq!(f.receiver_id, 1);
    }

    #[test]
    fn permutation_maps_slots() {
        assert_eq!(rx_permutation(3, 0b00_01_10), vec![2, 1, 0]);
        assert_eq!(rx_permutation(3, 0b00_00_00), vec![0, 1, 2]);
        assert_eq!(rx_permutation(2, 0b01), vec![1, 0]);
    }

    #[test]
    fn truncated_field_reports_partial_result() {
        let rec = record(1, 2, vec![5; payload_len(1, 2)]);
        let mut bytes = encode_bfee(&rec);
        let second = encode_bfee(&rec);
        bytes.extend_from_slice(&second[..second.len() - 4]);
        let r = parse_dat_stream(&bytes);
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.truncated, 1);
        assert!(r.error.is_some());
        let r = parse_dat_stream(&[0, 9]);
        assert_eq!((r.records.len(), r.truncated), (0, 1));
    }

    #[test]
    fn inconsistent_payload_is_skipped() {
        let mut rec = record(2, 2, vec![0; payload_len(2, 2)]);
        let good = encode_bfee(&rec);
        rec.n_rx = 3; // header now disagrees with the payload length
        let mut bytes = encode_bfee(&rec);
        bytes.extend_from_slice(&good);
        let r = parse_dat_stream(&bytes);
        assert_eq!((r.records.len(), r.invalid), (1, 1));
    }

    #[test]
    fn short_payload_fails_decode() {
        let rec = record(3, 3, vec![0; 10]);
        assert!(matches!(
            decode_bfee(&rec, 0),
            Err(CsiError::InvalidRecord(_))
        ));
    }
}
