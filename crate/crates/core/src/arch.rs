//! CPU architecture identification.
//!
//! Individual files are identified from their ELF header (or bFLT magic) and
//! raw blobs fall back to a word-signature profile. A root filesystem's
//! architecture is the majority vote over its executables; ties are kept so
//! emulation can try every tied architecture.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ArchFamily {
    ARM,
    MIPS,
    MIPSel,
    PowerPC,
    I386,
    CRIS,
    BFLT,
    NiosII,
    ARC,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Endianness {
    Little,
    Big,
    NA,
}

/// Architecture family plus byte order. MIPS is always big-endian and
/// MIPSel always little-endian; the constructor enforces it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ArchId {
    family: ArchFamily,
    endianness: Endianness,
}

impl ArchId {
    pub const UNKNOWN: ArchId = ArchId { family: ArchFamily::Unknown, endianness: Endianness::NA };

    pub fn new(family: ArchFamily, endianness: Endianness) -> Self {
        let endianness = match family {
            ArchFamily::MIPS => Endianness::Big,
            ArchFamily::MIPSel => Endianness::Little,
            ArchFamily::BFLT => Endianness::NA,
            _ => endianness,
        };
        ArchId { family, endianness }
    }

    pub fn family(&self) -> ArchFamily {
        self.family
    }

    pub fn endianness(&self) -> Endianness {
        self.endianness
    }

    /// Short stable tag, used for session names and file names.
    pub fn tag(&self) -> &'static str {
        match (self.family, self.endianness) {
            (ArchFamily::ARM, Endianness::Big) => "armeb",
            (ArchFamily::ARM, _) => "arm",
            (ArchFamily::MIPS, _) => "mips",
            (ArchFamily::MIPSel, _) => "mipsel",
            (ArchFamily::PowerPC, _) => "ppc",
            (ArchFamily::I386, _) => "i386",
            (ArchFamily::CRIS, _) => "cris",
            (ArchFamily::BFLT, _) => "bflt",
            (ArchFamily::NiosII, _) => "nios2",
            (ArchFamily::ARC, _) => "arc",
            (ArchFamily::Unknown, _) => "unknown",
        }
    }

    pub fn from_tag(tag: &str) -> Option<ArchId> {
        use ArchFamily::*;
        use Endianness::*;
        Some(match tag {
            "arm" => ArchId::new(ARM, Little),
            "armeb" => ArchId::new(ARM, Big),
            "mips" => ArchId::new(MIPS, Big),
            "mipsel" => ArchId::new(MIPSel, Little),
            "ppc" => ArchId::new(PowerPC, Big),
            "i386" => ArchId::new(I386, Little),
            "cris" => ArchId::new(CRIS, Little),
            "bflt" => ArchId::new(BFLT, NA),
            "nios2" => ArchId::new(NiosII, Little),
            "arc" => ArchId::new(ARC, Little),
            "unknown" => ArchId::UNKNOWN,
            _ => return None,
        })
    }

    /// Families without a usable generic guest (bFLT is a format, ARC and
    /// unidentified binaries have no QEMU system target in the toolchain).
    pub fn is_emulatable(&self) -> bool {
        !matches!(self.family, ArchFamily::BFLT | ArchFamily::ARC | ArchFamily::Unknown)
    }
}

pub const ELF_MAGIC: [u8; 4] = [0x7F, b'E', b'L', b'F'];
pub const BFLT_MAGIC: [u8; 4] = *b"bFLT";

const EI_DATA: usize = 5;
const E_MACHINE: usize = 18;

pub const EM_386: u16 = 0x03;
pub const EM_MIPS: u16 = 0x08;
pub const EM_PPC: u16 = 0x14;
pub const EM_PPC64: u16 = 0x15;
pub const EM_ARM: u16 = 0x28;
pub const EM_ARC: u16 = 0x2D;
pub const EM_CRIS: u16 = 0x4C;
pub const EM_ARC_COMPACT: u16 = 0x5D;
pub const EM_NIOS2: u16 = 0x71;
pub const EM_ARC_COMPACT2: u16 = 0xC3;

/// Identify a single file.
pub fn detect_file_arch(bytes: &[u8]) -> Option<ArchId> {
    if bytes.starts_with(&ELF_MAGIC) {
        return elf_arch(bytes);
    }
    if bytes.starts_with(&BFLT_MAGIC) {
        return Some(ArchId::new(ArchFamily::BFLT, Endianness::NA));
    }
    opcode_histogram(bytes).map(|(arch, _)| arch)
}

fn elf_arch(bytes: &[u8]) -> Option<ArchId> {
    if bytes.len() < E_MACHINE + 2 {
        return None;
    }
    let raw = [bytes[E_MACHINE], bytes[E_MACHINE + 1]];
    let (endianness, machine) = match bytes[EI_DATA] {
        1 => (Endianness::Little, u16::from_le_bytes(raw)),
        2 => (Endianness::Big, u16::from_be_bytes(raw)),
        _ => return None,
    };
    let family = match machine {
        EM_ARM => ArchFamily::ARM,
        EM_MIPS if endianness == Endianness::Little => ArchFamily::MIPSel,
        EM_MIPS => ArchFamily::MIPS,
        EM_PPC | EM_PPC64 => ArchFamily::PowerPC,
        EM_386 => ArchFamily::I386,
        EM_CRIS => ArchFamily::CRIS,
        EM_NIOS2 => ArchFamily::NiosII,
        EM_ARC | EM_ARC_COMPACT | EM_ARC_COMPACT2 => ArchFamily::ARC,
        _ => ArchFamily::Unknown,
    };
    Some(ArchId::new(family, endianness))
}

/// Minimum blob length for signature matching.
pub const OPCODE_MIN_LEN: usize = 1024;

/// Normalized hit rate a profile must exceed to be reported.
pub const OPCODE_THRESHOLD: f64 = 0.02;

struct WordPattern {
    mask: u32,
    value: u32,
}

struct OpcodeProfile {
    arch: ArchId,
    little_endian: bool,
    patterns: &'static [WordPattern],
}

const fn word(mask: u32, value: u32) -> WordPattern {
    WordPattern { mask, value }
}

// Function prologue/epilogue words.
const MIPS_WORDS: &[WordPattern] = &[
    word(0xFFFF_FFFF, 0x03E0_0008), // jr ra
    word(0xFFFF_0000, 0x27BD_0000), // addiu sp, sp, imm
    word(0xFFFF_0000, 0xAFBF_0000), // sw ra, imm(sp)
    word(0xFFFF_0000, 0x8FBF_0000), // lw ra, imm(sp)
];

const ARM_WORDS: &[WordPattern] = &[
    word(0xFFFF_FFFF, 0xE12F_FF1E), // bx lr
    word(0xFFFF_4000, 0xE92D_4000), // push {..., lr}
    word(0xFFFF_8000, 0xE8BD_8000), // pop {..., pc}
];

const PPC_WORDS: &[WordPattern] = &[
    word(0xFFFF_FFFF, 0x4E80_0020), // blr
    word(0xFFFF_FFFF, 0x7C08_02A6), // mflr r0
    word(0xFFFF_0000, 0x9421_0000), // stwu r1, imm(r1)
];

const PROFILES: &[OpcodeProfile] = &[
    OpcodeProfile {
        arch: ArchId { family: ArchFamily::ARM, endianness: Endianness::Little },
        little_endian: true,
        patterns: ARM_WORDS,
    },
    OpcodeProfile {
        arch: ArchId { family: ArchFamily::ARM, endianness: Endianness::Big },
        little_endian: false,
        patterns: ARM_WORDS,
    },
    OpcodeProfile {
        arch: ArchId { family: ArchFamily::MIPS, endianness: Endianness::Big },
        little_endian: false,
        patterns: MIPS_WORDS,
    },
    OpcodeProfile {
        arch: ArchId { family: ArchFamily::MIPSel, endianness: Endianness::Little },
        little_endian: true,
        patterns: MIPS_WORDS,
    },
    OpcodeProfile {
        arch: ArchId { family: ArchFamily::PowerPC, endianness: Endianness::Big },
        little_endian: false,
        patterns: PPC_WORDS,
    },
];

/// Per-profile hit rates over the aligned words of `bytes`, in profile order.
/// Exposed so callers can inspect how close a blob came to each profile.
pub fn opcode_hit_rates(bytes: &[u8]) -> Vec<(ArchId, f64)> {
    let words = bytes.len() / 4;
    PROFILES
        .iter()
        .map(|profile| {
            if words == 0 {
                return (profile.arch, 0.0);
            }
            let hits = bytes
                .chunks_exact(4)
                .filter(|chunk| {
                    let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
                    let w = if profile.little_endian {
                        u32::from_le_bytes(raw)
                    } else {
                        u32::from_be_bytes(raw)
                    };
                    profile.patterns.iter().any(|p| w & p.mask == p.value)
                })
                .count();
            (profile.arch, hits as f64 / words as f64)
        })
        .collect()
}

/// Best-matching signature profile for a raw blob, if its hit rate clears
/// [`OPCODE_THRESHOLD`].
pub fn opcode_histogram(bytes: &[u8]) -> Option<(ArchId, f64)> {
    if bytes.len() < OPCODE_MIN_LEN {
        return None;
    }
    let mut best: Option<(ArchId, f64)> = None;
    for (arch, rate) in opcode_hit_rates(bytes) {
        if best.map_or(true, |(_, r)| rate > r) {
            best = Some((arch, rate));
        }
    }
    best.filter(|&(_, rate)| rate > OPCODE_THRESHOLD)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchVote {
    pub arch: ArchId,
    pub count: u64,
}

/// Running vote tally. Adding is commutative, so any enumeration order gives
/// the same guess.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ArchTally {
    votes: BTreeMap<ArchId, u64>,
}

impl ArchTally {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, arch: ArchId) {
        *self.votes.entry(arch).or_insert(0) += 1;
    }

    pub fn merge(&mut self, other: &ArchTally) {
        for (arch, count) in &other.votes {
            *self.votes.entry(*arch).or_insert(0) += count;
        }
    }

    pub fn finish(&self) -> ArchitectureGuess {
        let votes: Vec<ArchVote> =
            self.votes.iter().map(|(&arch, &count)| ArchVote { arch, count }).collect();
        let total: u64 = votes.iter().map(|v| v.count).sum();
        if total == 0 {
            return ArchitectureGuess {
                votes,
                winner: ArchId::UNKNOWN,
                runner_up: None,
                confidence: 0.0,
                tie: false,
                tied: Vec::new(),
            };
        }
        // Descending count, then enum order.
        let mut ranked = votes.clone();
        ranked.sort_by(|a, b| b.count.cmp(&a.count).then(a.arch.cmp(&b.arch)));
        let top = ranked[0].count;
        let tied: Vec<ArchId> = ranked.iter().filter(|v| v.count == top).map(|v| v.arch).collect();
        ArchitectureGuess {
            winner: ranked[0].arch,
            runner_up: ranked.get(1).map(|v| v.arch),
            confidence: top as f64 / total as f64,
            tie: tied.len() > 1,
            tied,
            votes,
        }
    }
}

impl<I: IntoIterator<Item = ArchId>> From<I> for ArchTally {
    fn from(iter: I) -> Self {
        let mut tally = ArchTally::new();
        for arch in iter {
            tally.add(arch);
        }
        tally
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureGuess {
    /// Vote counts, sorted by architecture.
    pub votes: Vec<ArchVote>,
    pub winner: ArchId,
    pub runner_up: Option<ArchId>,
    pub confidence: f64,
    pub tie: bool,
    /// Every architecture sharing the maximal count, in enum order.
    pub tied: Vec<ArchId>,
}

impl ArchitectureGuess {
    pub fn total(&self) -> u64 {
        self.votes.iter().map(|v| v.count).sum()
    }

    pub fn count(&self, arch: ArchId) -> u64 {
        self.votes.iter().find(|v| v.arch == arch).map_or(0, |v| v.count)
    }

    /// Architectures emulation should attempt, in order. Never empty.
    pub fn arch_list(&self) -> Vec<ArchId> {
        if self.tied.is_empty() {
            alloc::vec![self.winner]
        } else {
            self.tied.clone()
        }
    }
}
