//! Canonical wire encoding.
//!
//! Fields are written in declaration order. Integers are big-endian,
//! variable-length values carry a `u32` length prefix, fixed-size arrays are
//! written raw, and enum variants are a `u8` tag followed by their fields.
//! Sets and maps are written in ascending order and decoding rejects anything
//! that is not strictly ascending, so every value has exactly one encoding.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::crypto::{AgreementPublic, Digest, PublicKey, Signature};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("input truncated")]
    Truncated,
    #[error("{0} trailing byte(s) after value")]
    TrailingBytes(usize),
    #[error("invalid tag {tag} for {what}")]
    InvalidTag { what: &'static str, tag: u8 },
    #[error("string is not valid UTF-8")]
    InvalidUtf8,
    #[error("non-canonical encoding: {0}")]
    NonCanonical(&'static str),
}

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_raw(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn put_len(&mut self, len: usize) {
        let len = u32::try_from(len).expect("value longer than u32::MAX bytes");
        self.put_raw(&len.to_be_bytes());
    }

    pub fn put_bytes(&mut self, bytes: &[u8]) {
        self.put_len(bytes.len());
        self.put_raw(bytes);
    }

    pub fn put<T: Canonical>(&mut self, value: &T) {
        value.encode(self);
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn length(&mut self) -> Result<usize, DecodeError> {
        let len = u32::decode(self)? as usize;
        // Every element occupies at least one byte, so a length beyond the
        // remaining input can only be truncated garbage.
        if len > self.remaining() {
            return Err(DecodeError::Truncated);
        }
        Ok(len)
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let len = self.length()?;
        Ok(self.take(len)?.to_vec())
    }

    pub fn get<T: Canonical>(&mut self) -> Result<T, DecodeError> {
        T::decode(self)
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.buf.len() {
            0 => Ok(()),
            n => Err(DecodeError::TrailingBytes(n)),
        }
    }
}

pub trait Canonical: Sized {
    fn encode(&self, w: &mut Writer);
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError>;

    fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.into_bytes()
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let v = Self::decode(&mut r)?;
        r.finish()?;
        Ok(v)
    }
}

pub fn encode<T: Canonical>(value: &T) -> Vec<u8> {
    value.to_bytes()
}

pub fn decode<T: Canonical>(bytes: &[u8]) -> Result<T, DecodeError> {
    T::from_bytes(bytes)
}

macro_rules! int_impl {
    ($($t:ty),*) => {$(
        impl Canonical for $t {
            fn encode(&self, w: &mut Writer) {
                w.put_raw(&self.to_be_bytes());
            }
            fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
                let b = r.take(std::mem::size_of::<$t>())?;
                Ok(<$t>::from_be_bytes(b.try_into().expect("sized take")))
            }
        }
    )*};
}

int_impl!(u8, u16, u32, u64);

impl Canonical for bool {
    fn encode(&self, w: &mut Writer) {
        w.put_u8(u8::from(*self));
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(DecodeError::InvalidTag { what: "bool", tag }),
        }
    }
}

impl Canonical for String {
    fn encode(&self, w: &mut Writer) {
        w.put_bytes(self.as_bytes());
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        String::from_utf8(r.bytes()?).map_err(|_| DecodeError::InvalidUtf8)
    }
}

impl<const N: usize> Canonical for [u8; N] {
    fn encode(&self, w: &mut Writer) {
        w.put_raw(self);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(r.take(N)?.try_into().expect("sized take"))
    }
}

impl<T: Canonical> Canonical for Vec<T> {
    fn encode(&self, w: &mut Writer) {
        w.put_len(self.len());
        for item in self {
            item.encode(w);
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.length()?;
        (0..n).map(|_| T::decode(r)).collect()
    }
}

impl<T: Canonical> Canonical for Option<T> {
    fn encode(&self, w: &mut Writer) {
        match self {
            None => w.put_u8(0),
            Some(v) => {
                w.put_u8(1);
                v.encode(w);
            }
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(None),
            1 => Ok(Some(T::decode(r)?)),
            tag => Err(DecodeError::InvalidTag { what: "option", tag }),
        }
    }
}

impl<A: Canonical, B: Canonical> Canonical for (A, B) {
    fn encode(&self, w: &mut Writer) {
        self.0.encode(w);
        self.1.encode(w);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok((A::decode(r)?, B::decode(r)?))
    }
}

impl<T: Canonical + Ord> Canonical for BTreeSet<T> {
    fn encode(&self, w: &mut Writer) {
        w.put_len(self.len());
        for item in self {
            item.encode(w);
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.length()?;
        let mut out = BTreeSet::new();
        for _ in 0..n {
            let item = T::decode(r)?;
            if out.last().is_some_and(|last| *last >= item) {
                return Err(DecodeError::NonCanonical("set not strictly ascending"));
            }
            out.insert(item);
        }
        Ok(out)
    }
}

impl<K: Canonical + Ord, V: Canonical> Canonical for BTreeMap<K, V> {
    fn encode(&self, w: &mut Writer) {
        w.put_len(self.len());
        for (k, v) in self {
            k.encode(w);
            v.encode(w);
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.length()?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let k = K::decode(r)?;
            if out.last_key_value().is_some_and(|(last, _)| *last >= k) {
                return Err(DecodeError::NonCanonical("map keys not strictly ascending"));
            }
            let v = V::decode(r)?;
            out.insert(k, v);
        }
        Ok(out)
    }
}

macro_rules! newtype_impl {
    ($($t:ident),*) => {$(
        impl Canonical for $t {
            fn encode(&self, w: &mut Writer) {
                w.put_raw(&self.0);
            }
            fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
                Ok($t(Canonical::decode(r)?))
            }
        }
    )*};
}

newtype_impl!(Digest, PublicKey, AgreementPublic, Signature);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers_are_big_endian() {
        assert_eq!(0x0102_0304u32.to_bytes(), vec![1, 2, 3, 4]);
        assert_eq!(1u64.to_bytes(), vec![0, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn strings_and_bytes_are_length_prefixed() {
        assert_eq!("ab".to_string().to_bytes(), vec![0, 0, 0, 2, b'a', b'b']);
        assert_eq!(vec![9u8].to_bytes(), vec![0, 0, 0, 1, 9]);
    }

    #[test]
    fn truncated_and_trailing_inputs_are_rejected() {
        let bytes = "hello".to_string().to_bytes();
        assert_eq!(
            String::from_bytes(&bytes[..bytes.len() - 1]),
            Err(DecodeError::Truncated)
        );
        let mut junk = bytes.clone();
        junk.push(0);
        assert_eq!(String::from_bytes(&junk), Err(DecodeError::TrailingBytes(1)));
    }

    #[test]
    fn bad_tags_are_rejected() {
        assert!(matches!(
            bool::from_bytes(&[2]),
            Err(DecodeError::InvalidTag { .. })
        ));
        assert!(matches!(
            Option::<u8>::from_bytes(&[7, 0]),
            Err(DecodeError::InvalidTag { .. })
        ));
    }

    #[test]
    fn unsorted_sets_are_non_canonical() {
        let mut w = Writer::new();
        w.put_len(2);
        w.put(&5u8);
        w.put(&3u8);
        assert!(matches!(
            BTreeSet::<u8>::from_bytes(&w.into_bytes()),
            Err(DecodeError::NonCanonical(_))
        ));
    }

    #[test]
    fn huge_length_prefix_does_not_allocate() {
        assert_eq!(
            Vec::<u8>::from_bytes(&[0xff, 0xff, 0xff, 0xff]),
            Err(DecodeError::Truncated)
        );
    }
}
