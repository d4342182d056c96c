//! Minimal x86-64 encoder covering the instructions the row kernel needs.
//!
//! Memory operands never use the EVEX compressed 8-bit displacement: EVEX
//! forms get either no displacement or a full 32-bit one.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
#[allow(dead_code)]
pub enum Gpr {
    Rax = 0,
    Rcx,
    Rdx,
    Rbx,
    Rsp,
    Rbp,
    Rsi,
    Rdi,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Gpr {
    fn low(self) -> u8 {
        self as u8 & 7
    }

    fn ext(self) -> bool {
        self as u8 >= 8
    }
}

/// `[base + index * scale + disp]`
#[derive(Debug, Clone, Copy)]
pub struct Mem {
    pub base: Gpr,
    pub index: Option<(Gpr, u8)>,
    pub disp: i32,
}

impl Mem {
    pub fn base(base: Gpr, disp: i32) -> Self {
        Self { base, index: None, disp }
    }

    pub fn indexed(base: Gpr, index: Gpr, scale: u8, disp: i32) -> Self {
        debug_assert!(index != Gpr::Rsp);
        Self { base, index: Some((index, scale)), disp }
    }
}

/// Vector operand width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Width {
    X128,
    Y256,
    Z512,
}

impl Width {
    /// The register class holding `lanes` `f32`s; single lanes use xmm.
    pub fn for_lanes(lanes: usize) -> Self {
        match lanes {
            16 => Width::Z512,
            8 => Width::Y256,
            _ => Width::X128,
        }
    }

    fn ll(self) -> u8 {
        match self {
            Width::X128 => 0,
            Width::Y256 => 1,
            Width::Z512 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Cond {
    /// unsigned `>=`
    Ae = 0x3,
    /// unsigned `>`
    A = 0x7,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label(usize);

/// Opcode map selector shared by VEX and EVEX.
#[derive(Debug, Clone, Copy)]
enum Map {
    M0f = 1,
    M0f38 = 2,
}

/// Implied legacy prefix.
#[derive(Debug, Clone, Copy)]
enum Pp {
    None = 0,
    P66 = 1,
    Pf3 = 2,
}

/// The `rm` side of a ModRM byte.
#[derive(Clone, Copy)]
enum Rm {
    Reg(u8),
    Mem(Mem),
}

#[derive(Default)]
pub struct Assembler {
    code: Vec<u8>,
    labels: Vec<Option<usize>>,
    fixups: Vec<(usize, Label)>,
}

impl Assembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn new_label(&mut self) -> Label {
        self.labels.push(None);
        Label(self.labels.len() - 1)
    }

    pub fn bind(&mut self, l: Label) {
        debug_assert!(self.labels[l.0].is_none(), "label bound twice");
        self.labels[l.0] = Some(self.code.len());
    }

    /// Resolves jumps and returns the machine code.
    pub fn finish(mut self) -> Vec<u8> {
        for &(at, label) in &self.fixups {
            let target = self.labels[label.0].expect("jump to unbound label");
            let rel = target as i64 - (at as i64 + 4);
            let rel = i32::try_from(rel).expect("jump out of rel32 range");
            self.code[at..at + 4].copy_from_slice(&rel.to_le_bytes());
        }
        self.code
    }

    fn byte(&mut self, b: u8) {
        self.code.push(b);
    }

    fn bytes(&mut self, b: &[u8]) {
        self.code.extend_from_slice(b);
    }

    fn rex(&mut self, w: bool, r: bool, x: bool, b: bool, force: bool) {
        let v = 0x40 | (u8::from(w) << 3) | (u8::from(r) << 2) | (u8::from(x) << 1) | u8::from(b);
        if v != 0x40 || force {
            self.byte(v);
        }
    }

    /// ModRM (+ SIB + displacement) for `reg` (low three bits) and `rm`.
    fn modrm(&mut self, reg: u8, rm: Rm, allow_disp8: bool) {
        let reg = (reg & 7) << 3;
        let m = match rm {
            Rm::Reg(r) => {
                self.byte(0xC0 | reg | (r & 7));
                return;
            }
            Rm::Mem(m) => m,
        };
        let needs_disp = m.disp != 0 || m.base.low() == 5;
        let (mode, disp_len) = if !needs_disp {
            (0x00, 0)
        } else if allow_disp8 && i8::try_from(m.disp).is_ok() {
            (0x40, 1)
        } else {
            (0x80, 4)
        };
        match m.index {
            None if m.base.low() != 4 => self.byte(mode | reg | m.base.low()),
            index => {
                self.byte(mode | reg | 4);
                let (idx, ss) = match index {
                    Some((i, scale)) => {
                        let ss = match scale {
                            1 => 0,
                            2 => 1,
                            4 => 2,
                            8 => 3,
                            _ => panic!("invalid scale {scale}"),
                        };
                        (i.low(), ss)
                    }
                    // no index
                    None => (4, 0),
                };
                self.byte((ss << 6) | (idx << 3) | m.base.low());
            }
        }
        match disp_len {
            1 => self.byte(m.disp as i8 as u8),
            4 => self.bytes(&m.disp.to_le_bytes()),
            _ => {}
        }
    }

    fn mem_ext(m: &Mem) -> (bool, bool) {
        (m.index.is_some_and(|(i, _)| i.ext()), m.base.ext())
    }

    // ---- general purpose ----

    pub fn push(&mut self, r: Gpr) {
        self.rex(false, false, false, r.ext(), false);
        self.byte(0x50 + r.low());
    }

    pub fn pop(&mut self, r: Gpr) {
        self.rex(false, false, false, r.ext(), false);
        self.byte(0x58 + r.low());
    }

    pub fn ret(&mut self) {
        self.byte(0xC3);
    }

    /// `mov dst, qword [m]`
    pub fn mov_load64(&mut self, dst: Gpr, m: Mem) {
        let (x, b) = Self::mem_ext(&m);
        self.rex(true, dst.ext(), x, b, false);
        self.byte(0x8B);
        self.modrm(dst as u8, Rm::Mem(m), true);
    }

    /// `mov dst32, dword [m]`, zero-extending into the full register.
    pub fn mov_load32(&mut self, dst: Gpr, m: Mem) {
        let (x, b) = Self::mem_ext(&m);
        self.rex(false, dst.ext(), x, b, false);
        self.byte(0x8B);
        self.modrm(dst as u8, Rm::Mem(m), true);
    }

    /// `mov dst, src` (64-bit)
    pub fn mov_rr(&mut self, dst: Gpr, src: Gpr) {
        self.rex(true, src.ext(), false, dst.ext(), false);
        self.byte(0x89);
        self.modrm(src as u8, Rm::Reg(dst as u8), true);
    }

    /// `mov dst, imm`; sign-extended imm32 when it fits, else movabs.
    pub fn mov_ri(&mut self, dst: Gpr, imm: i64) {
        if let Ok(imm32) = i32::try_from(imm) {
            self.rex(true, false, false, dst.ext(), false);
            self.byte(0xC7);
            self.modrm(0, Rm::Reg(dst as u8), true);
            self.bytes(&imm32.to_le_bytes());
        } else {
            self.rex(true, false, false, dst.ext(), false);
            self.byte(0xB8 + dst.low());
            self.bytes(&imm.to_le_bytes());
        }
    }

    /// `add dst, src` (64-bit)
    pub fn add_rr(&mut self, dst: Gpr, src: Gpr) {
        self.rex(true, src.ext(), false, dst.ext(), false);
        self.byte(0x01);
        self.modrm(src as u8, Rm::Reg(dst as u8), true);
    }

    /// `shl dst, imm8`
    pub fn shl_ri(&mut self, dst: Gpr, imm: u8) {
        self.rex(true, false, false, dst.ext(), false);
        self.byte(0xC1);
        self.modrm(4, Rm::Reg(dst as u8), true);
        self.byte(imm);
    }

    /// `imul dst, src, imm32`
    pub fn imul_rri(&mut self, dst: Gpr, src: Gpr, imm: i32) {
        self.rex(true, dst.ext(), false, src.ext(), false);
        self.byte(0x69);
        self.modrm(dst as u8, Rm::Reg(src as u8), true);
        self.bytes(&imm.to_le_bytes());
    }

    /// `inc r` (64-bit)
    pub fn inc(&mut self, r: Gpr) {
        self.rex(true, false, false, r.ext(), false);
        self.byte(0xFF);
        self.modrm(0, Rm::Reg(r as u8), true);
    }

    /// `cmp a, b` (64-bit), flags from `a - b`
    pub fn cmp_rr(&mut self, a: Gpr, b: Gpr) {
        self.rex(true, b.ext(), false, a.ext(), false);
        self.byte(0x39);
        self.modrm(b as u8, Rm::Reg(a as u8), true);
    }

    /// `cmova dst, src` (64-bit)
    pub fn cmova_rr(&mut self, dst: Gpr, src: Gpr) {
        self.rex(true, dst.ext(), false, src.ext(), false);
        self.bytes(&[0x0F, 0x40 | Cond::A as u8]);
        self.modrm(dst as u8, Rm::Reg(src as u8), true);
    }

    /// `lock xadd qword [m], src`
    pub fn lock_xadd(&mut self, m: Mem, src: Gpr) {
        self.byte(0xF0);
        let (x, b) = Self::mem_ext(&m);
        self.rex(true, src.ext(), x, b, false);
        self.bytes(&[0x0F, 0xC1]);
        self.modrm(src as u8, Rm::Mem(m), true);
    }

    pub fn jcc(&mut self, cond: Cond, target: Label) {
        self.bytes(&[0x0F, 0x80 | cond as u8]);
        self.fixups.push((self.code.len(), target));
        self.bytes(&[0; 4]);
    }

    pub fn jmp(&mut self, target: Label) {
        self.byte(0xE9);
        self.fixups.push((self.code.len(), target));
        self.bytes(&[0; 4]);
    }

    pub fn vzeroupper(&mut self) {
        self.bytes(&[0xC5, 0xF8, 0x77]);
    }

    // ---- VEX (registers 0-15) ----

    #[allow(clippy::too_many_arguments)]
    fn vex(&mut self, map: Map, pp: Pp, l256: bool, reg: u8, vvvv: u8, rm: Rm, opcode: u8) {
        debug_assert!(reg < 16 && vvvv < 16);
        let (x, b) = match rm {
            Rm::Reg(r) => {
                debug_assert!(r < 16);
                (false, r >= 8)
            }
            Rm::Mem(m) => Self::mem_ext(&m),
        };
        self.byte(0xC4);
        self.byte((u8::from(reg < 8) << 7) | (u8::from(!x) << 6) | (u8::from(!b) << 5) | map as u8);
        self.byte(((!vvvv & 0xF) << 3) | (u8::from(l256) << 2) | pp as u8);
        self.byte(opcode);
        self.modrm(reg, rm, true);
    }

    // ---- EVEX (registers 0-31) ----

    #[allow(clippy::too_many_arguments)]
    fn evex(&mut self, map: Map, pp: Pp, w: Width, reg: u8, vvvv: u8, rm: Rm, opcode: u8) {
        debug_assert!(reg < 32 && vvvv < 32);
        let (x, b) = match rm {
            // high bit of a register rm lives in EVEX.X
            Rm::Reg(r) => (r & 16 != 0, r & 8 != 0),
            Rm::Mem(m) => Self::mem_ext(&m),
        };
        let p0 = (u8::from(reg & 8 == 0) << 7)
            | (u8::from(!x) << 6)
            | (u8::from(!b) << 5)
            | (u8::from(reg & 16 == 0) << 4)
            | map as u8;
        let p1 = ((!vvvv & 0xF) << 3) | 0x04 | pp as u8;
        let p2 = (w.ll() << 5) | (u8::from(vvvv & 16 == 0) << 3);
        self.bytes(&[0x62, p0, p1, p2, opcode]);
        self.modrm(reg, rm, false);
    }

    /// `vxorps r, r, r` (VEX). Clears the whole register, including upper lanes.
    pub fn vxorps_zero(&mut self, r: u8, w: Width) {
        self.vex(Map::M0f, Pp::None, w == Width::Y256, r, r, Rm::Reg(r), 0x57);
    }

    /// `vpxord r, r, r` (EVEX)
    pub fn vpxord_zero(&mut self, r: u8, w: Width) {
        self.evex(Map::M0f, Pp::P66, w, r, r, Rm::Reg(r), 0xEF);
    }

    /// `vbroadcastss dst, dword [m]`
    pub fn vbroadcastss(&mut self, dst: u8, m: Mem, w: Width, evex: bool) {
        if evex {
            self.evex(Map::M0f38, Pp::P66, w, dst, 0, Rm::Mem(m), 0x18);
        } else {
            self.vex(Map::M0f38, Pp::P66, w == Width::Y256, dst, 0, Rm::Mem(m), 0x18);
        }
    }

    /// `vmovss dst, dword [m]`
    pub fn vmovss_load(&mut self, dst: u8, m: Mem) {
        self.vex(Map::M0f, Pp::Pf3, false, dst, 0, Rm::Mem(m), 0x10);
    }

    /// `vfmadd231ps acc, src, [m]`: `acc = src * [m] + acc`
    pub fn vfmadd231ps(&mut self, acc: u8, src: u8, m: Mem, w: Width, evex: bool) {
        if evex {
            self.evex(Map::M0f38, Pp::P66, w, acc, src, Rm::Mem(m), 0xB8);
        } else {
            self.vex(Map::M0f38, Pp::P66, w == Width::Y256, acc, src, Rm::Mem(m), 0xB8);
        }
    }

    /// `vfmadd231ss acc, src, dword [m]`
    pub fn vfmadd231ss(&mut self, acc: u8, src: u8, m: Mem, evex: bool) {
        if evex {
            self.evex(Map::M0f38, Pp::P66, Width::X128, acc, src, Rm::Mem(m), 0xB9);
        } else {
            self.vex(Map::M0f38, Pp::P66, false, acc, src, Rm::Mem(m), 0xB9);
        }
    }

    /// `vmovups [m], src`
    pub fn vmovups_store(&mut self, m: Mem, src: u8, w: Width, evex: bool) {
        if evex {
            self.evex(Map::M0f, Pp::None, w, src, 0, Rm::Mem(m), 0x11);
        } else {
            self.vex(Map::M0f, Pp::None, w == Width::Y256, src, 0, Rm::Mem(m), 0x11);
        }
    }

    /// `vmovss dword [m], src`
    pub fn vmovss_store(&mut self, m: Mem, src: u8, evex: bool) {
        if evex {
            self.evex(Map::M0f, Pp::Pf3, Width::X128, src, 0, Rm::Mem(m), 0x11);
        } else {
            self.vex(Map::M0f, Pp::Pf3, false, src, 0, Rm::Mem(m), 0x11);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use iced_x86::{Decoder, DecoderOptions, Formatter, IntelFormatter};

    fn disasm(code: &[u8]) -> Vec<String> {
        let mut dec = Decoder::with_ip(64, code, 0, DecoderOptions::NONE);
        let mut fmt = IntelFormatter::new();
        fmt.options_mut().set_uppercase_hex(false);
        fmt.options_mut().set_hex_prefix("0x");
        fmt.options_mut().set_hex_suffix("");
        fmt.options_mut().set_space_after_operand_separator(true);
        let mut out = Vec::new();
        for ins in dec.iter() {
            assert!(!ins.is_invalid(), "invalid encoding in {code:02x?}");
            let mut s = String::new();
            fmt.format(&ins, &mut s);
            out.push(s);
        }
        out
    }

    fn one(f: impl FnOnce(&mut Assembler)) -> String {
        let mut a = Assembler::new();
        f(&mut a);
        let v = disasm(&a.finish());
        assert_eq!(v.len(), 1, "{v:?}");
        v.into_iter().next().unwrap()
    }

    #[test]
    fn general_purpose() {
        assert_eq!(one(|a| a.push(Gpr::R12)), "push r12");
        assert_eq!(one(|a| a.pop(Gpr::Rbx)), "pop rbx");
        assert_eq!(one(|a| a.mov_load64(Gpr::R8, Mem::base(Gpr::Rdi, 0))), "mov r8, [rdi]");
        assert_eq!(one(|a| a.mov_load64(Gpr::R11, Mem::indexed(Gpr::R8, Gpr::Rsi, 8, 8))), "mov r11, [r8+rsi*8+8]");
        assert_eq!(one(|a| a.mov_load32(Gpr::R12, Mem::indexed(Gpr::R9, Gpr::R10, 4, 0))), "mov r12d, [r9+r10*4]");
        assert_eq!(one(|a| a.mov_load64(Gpr::R13, Mem::base(Gpr::R13, 0))), "mov r13, [r13]");
        assert_eq!(one(|a| a.mov_load64(Gpr::Rax, Mem::base(Gpr::R12, 16))), "mov rax, [r12+0x10]");
        assert_eq!(one(|a| a.mov_rr(Gpr::Rax, Gpr::R12)), "mov rax, r12");
        assert_eq!(one(|a| a.mov_ri(Gpr::Rsi, 128)), "mov rsi, 0x80");
        assert_eq!(one(|a| a.mov_ri(Gpr::R14, 1 << 40)), "mov r14, 0x10000000000");
        assert_eq!(one(|a| a.add_rr(Gpr::Rax, Gpr::R13)), "add rax, r13");
        assert_eq!(one(|a| a.shl_ri(Gpr::Rax, 6)), "shl rax, 6");
        assert_eq!(one(|a| a.imul_rri(Gpr::Rax, Gpr::R12, 180)), "imul rax, r12, 0xb4");
        assert_eq!(one(|a| a.inc(Gpr::R10)), "inc r10");
        assert_eq!(one(|a| a.cmp_rr(Gpr::R10, Gpr::R11)), "cmp r10, r11");
        assert_eq!(one(|a| a.cmova_rr(Gpr::Rdx, Gpr::R14)), "cmova rdx, r14");
        assert_eq!(one(|a| a.lock_xadd(Mem::base(Gpr::R15, 0), Gpr::Rsi)), "lock xadd [r15], rsi");
        assert_eq!(one(|a| a.vzeroupper()), "vzeroupper");
        assert_eq!(one(|a| a.ret()), "ret");
    }

    #[test]
    fn vex_forms() {
        assert_eq!(one(|a| a.vxorps_zero(13, Width::Y256)), "vxorps ymm13, ymm13, ymm13");
        assert_eq!(one(|a| a.vxorps_zero(2, Width::X128)), "vxorps xmm2, xmm2, xmm2");
        let vals = Mem::indexed(Gpr::Rcx, Gpr::R10, 4, 0);
        assert_eq!(one(|a| a.vbroadcastss(15, vals, Width::Y256, false)), "vbroadcastss ymm15, [rcx+r10*4]");
        assert_eq!(one(|a| a.vmovss_load(15, vals)), "vmovss xmm15, [rcx+r10*4]");
        let x = Mem::base(Gpr::Rax, 96);
        assert_eq!(one(|a| a.vfmadd231ps(9, 15, x, Width::Y256, false)), "vfmadd231ps ymm9, ymm15, [rax+0x60]");
        assert_eq!(one(|a| a.vfmadd231ps(0, 15, x, Width::X128, false)), "vfmadd231ps xmm0, xmm15, [rax+0x60]");
        assert_eq!(one(|a| a.vfmadd231ss(4, 15, x, false)), "vfmadd231ss xmm4, xmm15, [rax+0x60]");
        assert_eq!(one(|a| a.vmovups_store(Mem::base(Gpr::Rax, 0), 12, Width::Y256, false)), "vmovups [rax], ymm12");
        assert_eq!(one(|a| a.vmovss_store(Mem::base(Gpr::Rax, 4), 3, false)), "vmovss [rax+4], xmm3");
    }

    #[test]
    fn evex_forms() {
        assert_eq!(one(|a| a.vpxord_zero(0, Width::Z512)), "vpxord zmm0, zmm0, zmm0");
        assert_eq!(one(|a| a.vpxord_zero(29, Width::Y256)), "vpxord ymm29, ymm29, ymm29");
        assert_eq!(one(|a| a.vpxord_zero(20, Width::X128)), "vpxord xmm20, xmm20, xmm20");
        let vals = Mem::indexed(Gpr::Rcx, Gpr::R10, 4, 0);
        assert_eq!(one(|a| a.vbroadcastss(31, vals, Width::Z512, true)), "vbroadcastss zmm31, [rcx+r10*4]");
        let x = Mem::base(Gpr::Rax, 64);
        assert_eq!(one(|a| a.vfmadd231ps(1, 31, x, Width::Z512, true)), "vfmadd231ps zmm1, zmm31, [rax+0x40]");
        assert_eq!(
            one(|a| a.vfmadd231ps(18, 31, Mem::base(Gpr::Rax, 0), Width::Y256, true)),
            "vfmadd231ps ymm18, ymm31, [rax]"
        );
        assert_eq!(
            one(|a| a.vfmadd231ps(3, 31, Mem::base(Gpr::Rax, 160), Width::X128, true)),
            "vfmadd231ps xmm3, xmm31, [rax+0xa0]"
        );
        assert_eq!(
            one(|a| a.vfmadd231ss(4, 31, Mem::base(Gpr::Rax, 176), true)),
            "vfmadd231ss xmm4, xmm31, [rax+0xb0]"
        );
        assert_eq!(
            one(|a| a.vmovups_store(Mem::base(Gpr::Rax, 64), 17, Width::Z512, true)),
            "vmovups [rax+0x40], zmm17"
        );
        assert_eq!(one(|a| a.vmovss_store(Mem::base(Gpr::Rax, 176), 4, true)), "vmovss [rax+0xb0], xmm4");
        assert_eq!(
            one(|a| a.vfmadd231ps(25, 31, Mem::base(Gpr::R13, 0), Width::Z512, true)),
            "vfmadd231ps zmm25, zmm31, [r13]"
        );
    }

    #[test]
    fn jumps_resolve_both_directions() {
        let mut a = Assembler::new();
        let top = a.new_label();
        let end = a.new_label();
        a.bind(top);
        a.cmp_rr(Gpr::Rsi, Gpr::Rdx);
        a.jcc(Cond::Ae, end);
        a.inc(Gpr::Rsi);
        a.jmp(top);
        a.bind(end);
        a.ret();
        let text = disasm(&a.finish());
        assert_eq!(text[1], "jae 0x0000000000000011");
        assert_eq!(text[3], "jmp 0");
    }
}
