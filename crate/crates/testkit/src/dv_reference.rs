//! Independent brute-force evaluations of the finite-key formulas.
//!
//! Counts are indexed `[basis][intensity]` with basis 0 = Z (key),
//! 1 = X (test), intensity 0 = signal (mu1), 1 = decoy (mu2).

fn h2(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

fn delta(n: f64, eps: f64) -> f64 {
    (n / 2.0 * (1.0 / eps).ln()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceKeyLength {
    pub secret_bits: u64,
    pub aborted: bool,
}

/// 1-decoy BB84 finite key length, transliterated term by term.
#[allow(clippy::too_many_arguments)]
pub fn onedecoy_reference(
    n: [[u64; 2]; 2],
    m: [[u64; 2]; 2],
    mu1: f64,
    mu2: f64,
    p_mu1: f64,
    eps_sec: f64,
    eps_cor: f64,
    f_ec: f64,
) -> ReferenceKeyLength {
    let eps1 = eps_sec / 19.0;
    let p1 = p_mu1;
    let p2 = 1.0 - p_mu1;
    let tau0 = p1 * (-mu1).exp() + p2 * (-mu2).exp();
    let tau1 = p1 * (-mu1).exp() * mu1 + p2 * (-mu2).exp() * mu2;

    // Per-basis bounds, written out longhand.
    let mut s0l = [0.0f64; 2];
    let mut s1l = [0.0f64; 2];
    let mut v1u = [0.0f64; 2];
    for basis in 0..2 {
        let n1 = n[basis][0] as f64;
        let n2 = n[basis][1] as f64;
        let m1 = m[basis][0] as f64;
        let m2 = m[basis][1] as f64;
        let dn = delta(n1 + n2, eps1);
        let dm = delta(m1 + m2, eps1);

        let n1_plus = mu1.exp() / p1 * (n1 + dn);
        let n2_minus = mu2.exp() / p2 * (n2 - dn);
        let m1_plus = mu1.exp() / p1 * (m1 + dm);
        let m2_plus = mu2.exp() / p2 * (m2 + dm);
        let m2_minus = mu2.exp() / p2 * (m2 - dm);

        let s0 = tau0 * (mu1 * n2_minus - mu2 * n1_plus) / (mu1 - mu2);
        s0l[basis] = if s0 > 0.0 { s0 } else { 0.0 };
        let s0u = 2.0 * (tau0 * m2_plus + dn);
        let s1 = tau1 * mu1 / (mu2 * (mu1 - mu2))
            * (n2_minus
                - (mu2 * mu2) / (mu1 * mu1) * n1_plus
                - (mu1 * mu1 - mu2 * mu2) / (mu1 * mu1) * s0u / tau0);
        s1l[basis] = if s1 > 0.0 { s1 } else { 0.0 };
        let v1 = tau1 * (m1_plus - m2_minus) / (mu1 - mu2);
        v1u[basis] = if v1 > 0.0 { v1 } else { 0.0 };
    }

    if s1l[1] <= 0.0 || s1l[0] <= 0.0 {
        return ReferenceKeyLength {
            secret_bits: 0,
            aborted: true,
        };
    }

    let b = v1u[1] / s1l[1];
    let phi = if b >= 0.5 {
        0.5
    } else {
        let c = s1l[1];
        let d = s1l[0];
        let gamma = if b <= 0.0 {
            0.0
        } else {
            let ln2 = std::f64::consts::LN_2;
            let first = (c + d) * (1.0 - b) * b / (c * d * ln2);
            let second = ((c + d) / (c * d * (1.0 - b) * b) * ((21.0 * 21.0) / (eps_sec * eps_sec)))
                .log2();
            let prod = first * second;
            if prod > 0.0 { prod.sqrt() } else { 0.0 }
        };
        let phi = b + gamma;
        if phi < 0.5 {
            phi
        } else {
            0.5
        }
    };
    if phi >= 0.5 {
        return ReferenceKeyLength {
            secret_bits: 0,
            aborted: true,
        };
    }

    let n_z = (n[0][0] + n[0][1]) as f64;
    let m_z = (m[0][0] + m[0][1]) as f64;
    let qber_z = if n_z > 0.0 { m_z / n_z } else { 0.0 };
    let lambda_ec = f_ec * n_z * h2(qber_z);

    let length = s0l[0] + s1l[0] * (1.0 - h2(phi))
        - lambda_ec
        - 6.0 * (19.0 / eps_sec).log2()
        - (2.0 / eps_cor).log2();

    ReferenceKeyLength {
        secret_bits: if length > 0.0 { length.floor() as u64 } else { 0 },
        aborted: false,
    }
}

/// BBM92 finite key length, transliterated term by term.
#[allow(clippy::too_many_arguments)]
pub fn bbm92_reference(
    n_key: u64,
    n_pe: u64,
    q_key: f64,
    q_pe: f64,
    q_tol: f64,
    eps_sec: f64,
    eps_cor: f64,
    f_ec: f64,
) -> ReferenceKeyLength {
    if q_pe > q_tol {
        return ReferenceKeyLength {
            secret_bits: 0,
            aborted: true,
        };
    }
    let nk = n_key as f64;
    let np = n_pe as f64;
    let nu = ((nk + np) * (np + 1.0) / (nk * (np * np)) * (4.0 / eps_sec).ln()).sqrt();
    let phase = if q_pe + nu < 0.5 { q_pe + nu } else { 0.5 };
    let length = nk * (1.0 - h2(phase))
        - f_ec * nk * h2(q_key)
        - (2.0 / eps_cor).log2()
        - 2.0 * (19.0 / eps_sec).log2();
    ReferenceKeyLength {
        secret_bits: if length > 0.0 { length.floor() as u64 } else { 0 },
        aborted: false,
    }
}
