//! Lossless entropy layer: symbols are split into a signed magnitude-bucket
//! token, coded with a static per-stream frequency table, and raw refinement
//! bits. Both go through one 32-bit range coder with carry propagation.
//! Only integer arithmetic is used, so output bytes are platform independent.

use crate::codec::bytes::{ByteReader, ByteWriter};
use crate::error::{EgsError, Result};

/// Token 0 is the zero symbol; bucket `b >= 1` (magnitudes in
/// `[2^(b-1), 2^b)`) has token `2b - 1` when positive and `2b` when negative.
pub const TOKEN_COUNT: usize = 65;
const PROB_BITS: u32 = 15;
const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

fn split(s: i32) -> (usize, u32, u32) {
    if s == 0 {
        return (0, 0, 0);
    }
    let mag = s.unsigned_abs();
    let b = 32 - mag.leading_zeros();
    let token = if s > 0 { 2 * b - 1 } else { 2 * b } as usize;
    let extra = b - 1;
    (token, extra, mag & ((1u32 << extra) - 1))
}

fn join(token: usize, raw: u32) -> i32 {
    if token == 0 {
        return 0;
    }
    let b = token.div_ceil(2) as u32;
    let mag = (1u64 << (b - 1)) | u64::from(raw);
    if token % 2 == 1 {
        mag as i32
    } else {
        (-(mag as i64)) as i32
    }
}

/// Static frequency table over tokens, normalized to a power-of-two total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyModel {
    freqs: [u32; TOKEN_COUNT],
    cum: [u32; TOKEN_COUNT + 1],
}

impl FrequencyModel {
    fn from_freqs(freqs: [u32; TOKEN_COUNT]) -> Result<Self> {
        let mut cum = [0u32; TOKEN_COUNT + 1];
        for t in 0..TOKEN_COUNT {
            cum[t + 1] = cum[t] + freqs[t];
        }
        if cum[TOKEN_COUNT] != PROB_TOTAL {
            return Err(EgsError::CorruptChunk(format!(
                "frequency table sums to {}, expected {PROB_TOTAL}",
                cum[TOKEN_COUNT]
            )));
        }
        Ok(Self { freqs, cum })
    }

    /// Table fitted to `symbols`; every occurring token gets a nonzero share.
    pub fn from_symbols(symbols: &[i32]) -> Self {
        let mut counts = [0u64; TOKEN_COUNT];
        for &s in symbols {
            counts[split(s).0] += 1;
        }
        let n = symbols.len() as u64;
        let mut freqs = [0u32; TOKEN_COUNT];
        if n == 0 {
            freqs[0] = PROB_TOTAL;
        } else {
            for t in 0..TOKEN_COUNT {
                if counts[t] > 0 {
                    freqs[t] = ((counts[t] * u64::from(PROB_TOTAL) / n) as u32).max(1);
                }
            }
            let sum: i64 = freqs.iter().map(|&f| i64::from(f)).sum();
            let biggest = (0..TOKEN_COUNT).max_by_key(|&t| (freqs[t], std::cmp::Reverse(t))).expect("non-empty");
            freqs[biggest] = (i64::from(freqs[biggest]) + i64::from(PROB_TOTAL) - sum) as u32;
        }
        Self::from_freqs(freqs).expect("normalized table")
    }

    pub fn freq(&self, token: usize) -> u32 {
        self.freqs[token]
    }

    fn write(&self, w: &mut ByteWriter) {
        let present: Vec<usize> = (0..TOKEN_COUNT).filter(|&t| self.freqs[t] > 0).collect();
        w.u8(present.len() as u8);
        for (k, &t) in present.iter().enumerate() {
            w.u8(t as u8);
            if k + 1 < present.len() {
                w.varint(u64::from(self.freqs[t]));
            }
        }
    }

    fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let n = usize::from(r.u8()?);
        if n == 0 || n > TOKEN_COUNT {
            return Err(EgsError::CorruptChunk(format!("frequency table with {n} tokens")));
        }
        let mut freqs = [0u32; TOKEN_COUNT];
        let mut used = 0u64;
        let mut last = None;
        for k in 0..n {
            let t = usize::from(r.u8()?);
            if t >= TOKEN_COUNT || last.is_some_and(|l| t <= l) {
                return Err(EgsError::CorruptChunk("frequency table tokens out of order".into()));
            }
            last = Some(t);
            let f = if k + 1 < n {
                r.varint()?
            } else {
                u64::from(PROB_TOTAL).checked_sub(used).unwrap_or(0)
            };
            if f == 0 || f > u64::from(PROB_TOTAL) {
                return Err(EgsError::CorruptChunk("invalid token frequency".into()));
            }
            used += f;
            freqs[t] = f as u32;
        }
        Self::from_freqs(freqs)
    }
}

struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl RangeEncoder {
    fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn encode(&mut self, cum: u32, freq: u32, total_bits: u32) {
        let r = self.range >> total_bits;
        self.low += u64::from(r) * u64::from(cum);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn raw_bits(&mut self, mut value: u32, mut n: u32) {
        debug_assert!(n < 32);
        while n > 0 {
            let k = n.min(16);
            n -= k;
            self.encode((value >> n) & ((1 << k) - 1), 1, k);
            value &= (1u32 << n) - 1;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            data,
            pos: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | u32::from(d.next_byte()?);
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| EgsError::CorruptChunk("truncated range-coded stream".into()))?;
        self.pos += 1;
        Ok(b)
    }

    fn target(&mut self, total_bits: u32) -> Result<(u32, u32)> {
        let r = self.range >> total_bits;
        let v = self.code / r;
        if v >= 1 << total_bits {
            return Err(EgsError::CorruptChunk("range decoder out of bounds".into()));
        }
        Ok((r, v))
    }

    fn consume(&mut self, r: u32, cum: u32, freq: u32) -> Result<()> {
        self.code -= r * cum;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
        }
        Ok(())
    }

    fn token(&mut self, model: &FrequencyModel) -> Result<usize> {
        let (r, v) = self.target(PROB_BITS)?;
        // largest t with cum[t] <= v
        let t = model.cum.partition_point(|&c| c <= v) - 1;
        if t >= TOKEN_COUNT || model.freqs[t] == 0 {
            return Err(EgsError::CorruptChunk("range decoder hit an empty token".into()));
        }
        self.consume(r, model.cum[t], model.freqs[t])?;
        Ok(t)
    }

    fn raw_bits(&mut self, n: u32) -> Result<u32> {
        let mut value = 0u32;
        let mut left = n;
        while left > 0 {
            let k = left.min(16);
            left -= k;
            let (r, v) = self.target(k)?;
            self.consume(r, v, 1)?;
            value |= v << left;
        }
        Ok(value)
    }
}

/// Range-codes `symbols` under `model`. Fails if a symbol's token has no
/// probability mass in the model.
pub fn entropy_encode(symbols: &[i32], model: &FrequencyModel) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        let (t, extra, raw) = split(s);
        let f = model.freqs[t];
        if f == 0 {
            return Err(EgsError::InvalidParameter(format!("symbol {s} has zero probability in the model")));
        }
        enc.encode(model.cum[t], f, PROB_BITS);
        enc.raw_bits(raw, extra);
    }
    Ok(enc.finish())
}

/// Decodes `count` symbols produced by [`entropy_encode`] with the same model.
pub fn entropy_decode(bytes: &[u8], count: usize, model: &FrequencyModel) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let t = dec.token(model)?;
        let extra = if t == 0 { 0 } else { t.div_ceil(2) as u32 - 1 };
        let raw = dec.raw_bits(extra)?;
        out.push(join(t, raw));
    }
    Ok(out)
}

/// Self-delimiting stream: count, table, byte length, coded bytes. An empty
/// symbol list is just the zero count.
pub fn write_stream(w: &mut ByteWriter, symbols: &[i32]) {
    w.varint(symbols.len() as u64);
    if symbols.is_empty() {
        return;
    }
    let model = FrequencyModel::from_symbols(symbols);
    model.write(w);
    let bytes = entropy_encode(symbols, &model).expect("model fitted to its symbols");
    w.varint(bytes.len() as u64);
    w.bytes(&bytes);
}

/// Reads a stream written by [`write_stream`], rejecting more than `limit` symbols.
pub fn read_stream(r: &mut ByteReader<'_>, limit: usize) -> Result<Vec<i32>> {
    let n = r.count(limit, "symbol stream")?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let model = FrequencyModel::read(r)?;
    let len = r.count(r.remaining(), "coded byte")?;
    let bytes = r.take(len)?;
    entropy_decode(bytes, n, &model)
}

/// Empirical cost of `symbols` in bits per symbol: token entropy plus the
/// raw refinement bits.
pub fn empirical_bits_per_symbol(symbols: &[i32]) -> f64 {
    if symbols.is_empty() {
        return 0.0;
    }
    let mut counts = [0usize; TOKEN_COUNT];
    let mut raw = 0u64;
    for &s in symbols {
        let (t, extra, _) = split(s);
        counts[t] += 1;
        raw += u64::from(extra);
    }
    let n = symbols.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h + raw as f64 / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn round_trip(symbols: &[i32]) -> Vec<u8> {
        let mut w = ByteWriter::new();
        write_stream(&mut w, symbols);
        let bytes = w.into_inner();
        let mut r = ByteReader::new(&bytes);
        assert_eq!(read_stream(&mut r, usize::MAX).unwrap(), symbols);
        assert!(r.is_empty());
        bytes
    }

    #[test]
    fn token_split_join() {
        for s in [0, 1, -1, 2, -2, 3, 7, -8, 32767, -32767, i32::MAX, i32::MIN] {
            let (t, extra, raw) = split(s);
            assert!(t < TOKEN_COUNT);
            assert!(extra < 32 && (extra == 0 || raw < 1 << extra));
            assert_eq!(join(t, raw), s, "symbol {s}");
        }
    }

    #[test]
    fn empty_stream_is_header_only() {
        assert_eq!(round_trip(&[]), vec![0]);
        let model = FrequencyModel::from_symbols(&[]);
        let bytes = entropy_encode(&[], &model).unwrap();
        assert_eq!(entropy_decode(&bytes, 0, &model).unwrap(), Vec::<i32>::new());
    }

    #[test]
    fn constant_zero_stream_is_tiny() {
        let zeros = vec![0; 10_000];
        let model = FrequencyModel::from_symbols(&zeros);
        let payload = entropy_encode(&zeros, &model).unwrap();
        assert!(payload.len() <= 64, "payload {} bytes", payload.len());
        assert_eq!(entropy_decode(&payload, zeros.len(), &model).unwrap(), zeros);
    }

    #[test]
    fn random_streams_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..200 {
            let n = rng.random_range(0..400);
            let spread = [1, 3, 40, 40_000, i32::MAX][case % 5];
            let s: Vec<i32> = (0..n).map(|_| rng.random_range(-spread..=spread)).collect();
            round_trip(&s);
        }
        round_trip(&[i32::MIN, i32::MAX, 0, -1]);
    }

    #[test]
    fn truncation_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s: Vec<i32> = (0..500).map(|_| rng.random_range(-300..300)).collect();
        let model = FrequencyModel::from_symbols(&s);
        let bytes = entropy_encode(&s, &model).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(entropy_decode(cut, s.len(), &model), Err(EgsError::CorruptChunk(_))));
    }

    #[test]
    fn symbol_outside_model_is_an_error() {
        let model = FrequencyModel::from_symbols(&[0, 0, 1]);
        assert!(entropy_encode(&[5], &model).is_err());
    }

    #[test]
    fn skewed_source_beats_raw_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<i32> = (0..5000).map(|_| if rng.random::<f64>() < 0.9 { 0 } else { rng.random_range(-3..=3) }).collect();
        let bytes = round_trip(&s);
        // 16-bit raw would be 10 kB
        assert!(bytes.len() < 1500, "{} bytes", bytes.len());
        let bits = empirical_bits_per_symbol(&s);
        assert!((bytes.len() as f64 * 8.0 / 5000.0) < bits + 0.2);
    }
}
