use bytes::Bytes;

use super::StreamError;

/// Framing overhead of one record: two `u32` length prefixes.
pub const RECORD_OVERHEAD: usize = 8;

/// A key/value record. The key may be empty, the value may not.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Record {
    pub key: Bytes,
    pub value: Bytes,
}

impl Record {
    pub fn new(key: impl Into<Bytes>, value: impl Into<Bytes>) -> Result<Self, StreamError> {
        let value = value.into();
        if value.is_empty() {
            return Err(StreamError::InvalidRecord("empty value"));
        }
        Ok(Self {
            key: key.into(),
            value,
        })
    }

    pub fn encoded_len(&self) -> usize {
        RECORD_OVERHEAD + self.key.len() + self.value.len()
    }

    pub fn as_ref(&self) -> RecordRef<'_> {
        RecordRef {
            key: &self.key,
            value: &self.value,
        }
    }
}

/// Borrowed view of a record inside a chunk payload or shared object buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordRef<'a> {
    pub key: &'a [u8],
    pub value: &'a [u8],
}

impl RecordRef<'_> {
    pub fn to_record(&self) -> Record {
        Record {
            key: Bytes::copy_from_slice(self.key),
            value: Bytes::copy_from_slice(self.value),
        }
    }
}

/// Encodes `[key_len: u32 LE][key][value_len: u32 LE][value]`.
pub fn encode_record(key: &[u8], value: &[u8]) -> Result<Vec<u8>, StreamError> {
    let mut buf = Vec::with_capacity(RECORD_OVERHEAD + key.len() + value.len());
    encode_record_into(&mut buf, key, value)?;
    Ok(buf)
}

pub fn encode_record_into(buf: &mut Vec<u8>, key: &[u8], value: &[u8]) -> Result<(), StreamError> {
    if value.is_empty() {
        return Err(StreamError::InvalidRecord("empty value"));
    }
    let key_len = u32::try_from(key.len()).map_err(|_| StreamError::InvalidRecord("key too long"))?;
    let value_len =
        u32::try_from(value.len()).map_err(|_| StreamError::InvalidRecord("value too long"))?;
    buf.extend_from_slice(&key_len.to_le_bytes());
    buf.extend_from_slice(key);
    buf.extend_from_slice(&value_len.to_le_bytes());
    buf.extend_from_slice(value);
    Ok(())
}

/// Decodes one framed record from the front of `buf`, returning it and the
/// number of bytes consumed.
pub fn decode_record(buf: &[u8]) -> Result<(RecordRef<'_>, usize), StreamError> {
    let (key, rest) = split_prefixed(buf)?;
    let (value, _) = split_prefixed(rest)?;
    if value.is_empty() {
        return Err(StreamError::InvalidRecord("empty value"));
    }
    Ok((RecordRef { key, value }, RECORD_OVERHEAD + key.len() + value.len()))
}

fn split_prefixed(buf: &[u8]) -> Result<(&[u8], &[u8]), StreamError> {
    let len_bytes: [u8; 4] = buf
        .get(..4)
        .ok_or(StreamError::Truncated)?
        .try_into()
        .expect("4-byte slice");
    let len = u32::from_le_bytes(len_bytes) as usize;
    let body = buf.get(4..4 + len).ok_or(StreamError::Truncated)?;
    Ok((body, &buf[4 + len..]))
}

/// Iterates the records of a concatenated payload without copying.
#[derive(Clone, Debug)]
pub struct RecordIter<'a> {
    rest: &'a [u8],
}

impl<'a> RecordIter<'a> {
    pub fn new(payload: &'a [u8]) -> Self {
        Self { rest: payload }
    }
}

impl<'a> Iterator for RecordIter<'a> {
    type Item = Result<RecordRef<'a>, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.rest.is_empty() {
            return None;
        }
        match decode_record(self.rest) {
            Ok((record, used)) => {
                self.rest = &self.rest[used..];
                Some(Ok(record))
            }
            Err(e) => {
                self.rest = &[];
                Some(Err(e))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_key_fixed_framing() {
        let framed = encode_record(b"", &[0u8; 100]).unwrap();
        assert_eq!(framed.len(), 108);
        assert_eq!(&framed[..4], &[0, 0, 0, 0]);
        assert_eq!(&framed[4..8], &100u32.to_le_bytes());
    }

    #[test]
    fn small_round_trip() {
        let framed = encode_record(b"a", b"b").unwrap();
        let (rec, used) = decode_record(&framed).unwrap();
        assert_eq!(used, framed.len());
        assert_eq!(rec.key, b"a");
        assert_eq!(rec.value, b"b");
    }

    #[test]
    fn empty_value_rejected() {
        assert_eq!(
            encode_record(b"k", b""),
            Err(StreamError::InvalidRecord("empty value"))
        );
        assert!(Record::new(Bytes::new(), Bytes::new()).is_err());
    }

    #[test]
    fn truncated_input() {
        let framed = encode_record(b"key", b"value").unwrap();
        for cut in 0..framed.len() {
            assert_eq!(decode_record(&framed[..cut]), Err(StreamError::Truncated));
        }
    }

    #[test]
    fn iterator_walks_payload() {
        let mut payload = Vec::new();
        for i in 0..5u8 {
            encode_record_into(&mut payload, &[i], &[i; 3]).unwrap();
        }
        let recs: Vec<_> = RecordIter::new(&payload).map(Result::unwrap).collect();
        assert_eq!(recs.len(), 5);
        assert_eq!(recs[4].key, &[4]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip(key in proptest::collection::vec(any::<u8>(), 0..16),
                      big in any::<bool>(),
                      fill in any::<u8>()) {
            let value = vec![fill; if big { 2048 } else { 100 }];
            let framed = encode_record(&key, &value).unwrap();
            let (rec, used) = decode_record(&framed).unwrap();
            prop_assert_eq!(used, framed.len());
            prop_assert_eq!(rec.key, &key[..]);
            prop_assert_eq!(rec.value, &value[..]);
        }
    }
}
