//! Iterative radix-2 complex FFT in double precision.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cpx {
    pub re: f64,
    pub im: f64,
}

impl Cpx {
    pub const ZERO: Cpx = Cpx { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Cpx {
        Cpx { re, im }
    }

    pub fn real(re: f64) -> Cpx {
        Cpx { re, im: 0.0 }
    }

    pub fn mul(self, other: Cpx) -> Cpx {
        Cpx {
            re: self.re * other.re - self.im * other.im,
            im: self.re * other.im + self.im * other.re,
        }
    }

    pub fn add(self, other: Cpx) -> Cpx {
        Cpx {
            re: self.re + other.re,
            im: self.im + other.im,
        }
    }

    pub fn sub(self, other: Cpx) -> Cpx {
        Cpx {
            re: self.re - other.re,
            im: self.im - other.im,
        }
    }

    pub fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }

    pub fn arg(self) -> f64 {
        self.im.atan2(self.re)
    }

    pub fn from_polar(r: f64, theta: f64) -> Cpx {
        Cpx {
            re: r * theta.cos(),
            im: r * theta.sin(),
        }
    }
}

pub fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// In-place forward FFT. `buf.len()` must be a power of two.
pub fn fft(buf: &mut [Cpx]) {
    transform(buf, -1.0);
}

/// In-place inverse FFT including the 1/N factor.
pub fn ifft(buf: &mut [Cpx]) {
    transform(buf, 1.0);
    let inv = 1.0 / buf.len() as f64;
    for c in buf.iter_mut() {
        c.re *= inv;
        c.im *= inv;
    }
}

fn transform(buf: &mut [Cpx], sign: f64) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "fft length {n} not a power of two");
    if n <= 1 {
        return;
    }
    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let wlen = Cpx::from_polar(1.0, ang);
        for start in (0..n).step_by(len) {
            let mut w = Cpx::real(1.0);
            for k in 0..len / 2 {
                let a = buf[start + k];
                let b = buf[start + k + len / 2].mul(w);
                buf[start + k] = a.add(b);
                buf[start + k + len / 2] = a.sub(b);
                w = w.mul(wlen);
            }
        }
        len <<= 1;
    }
}
