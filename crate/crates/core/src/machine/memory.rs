/// Flat memory made of named, separately mapped regions. Anything outside a
/// region (including every poisoned or non-canonical address) faults.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Memory {
    regions: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Region {
    name: &'static str,
    base: u64,
    bytes: Vec<u8>,
}

impl Memory {
    pub fn map(&mut self, name: &'static str, base: u64, size: u64) {
        self.regions.push(Region { name, base, bytes: vec![0; size as usize] });
    }

    fn locate(&self, addr: u64, len: u64) -> Option<(usize, usize)> {
        self.regions.iter().enumerate().find_map(|(k, r)| {
            let off = addr.checked_sub(r.base)?;
            (off.checked_add(len)? <= r.bytes.len() as u64).then_some((k, off as usize))
        })
    }

    pub fn is_mapped(&self, addr: u64, len: u64) -> bool {
        self.locate(addr, len).is_some()
    }

    /// Name of the region containing `addr`.
    pub fn region_of(&self, addr: u64) -> Option<&'static str> {
        self.locate(addr, 1).map(|(k, _)| self.regions[k].name)
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<&[u8], u64> {
        let (k, off) = self.locate(addr, len).ok_or(addr)?;
        Ok(&self.regions[k].bytes[off..off + len as usize])
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), u64> {
        let (k, off) = self.locate(addr, data.len() as u64).ok_or(addr)?;
        self.regions[k].bytes[off..off + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64, u64> {
        self.read(addr, 8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn write_u64(&mut self, addr: u64, v: u64) -> Result<(), u64> {
        self.write(addr, &v.to_le_bytes())
    }

    pub fn read_u32(&self, addr: u64) -> Result<u32, u64> {
        self.read(addr, 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn write_u32(&mut self, addr: u64, v: u32) -> Result<(), u64> {
        self.write(addr, &v.to_le_bytes())
    }

    /// `(name, base, bytes)` of every region.
    pub fn regions(&self) -> impl Iterator<Item = (&'static str, u64, &[u8])> + '_ {
        self.regions.iter().map(|r| (r.name, r.base, r.bytes.as_slice()))
    }
}
