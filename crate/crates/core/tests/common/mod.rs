#![allow(dead_code)]

use nmtune::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal entries.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng(seed);
    let data = (0..rows * cols).map(|_| r.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

/// `A^T A` on plain nested vectors.
pub fn gram(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = a[0].len();
    let mut g = vec![vec![0.0; d]; d];
    for row in a {
        for i in 0..d {
            for j in 0..d {
                g[i][j] += row[i] * row[j];
            }
        }
    }
    g
}

/// Eigenvalues of a symmetric matrix by the classical cyclic Jacobi method,
/// sorted descending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Floor on the denominator so entries that are zero up to rounding do not
/// blow up the ratio.
pub const REL_FLOOR: f64 = 1e-6;

/// Largest elementwise `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

pub fn matrix_with(shape: (usize, usize), data: &[f64]) -> Matrix {
    Matrix::from_vec(shape.0, shape.1, data.to_vec()).unwrap()
}

/// One request seen by [`MockServer`].
#[derive(Debug, Clone)]
pub struct Seen {
    pub headers: String,
    pub body: serde_json::Value,
}

/// Minimal HTTP/1.1 server on localhost. `respond(index, request)` returns
/// the status and JSON body for the `index`-th request. Every response
/// closes its connection.
pub struct MockServer {
    pub url: String,
    pub seen: std::sync::Arc<std::sync::Mutex<Vec<Seen>>>,
}

impl MockServer {
    pub fn start<F>(respond: F) -> Self
    where
        F: Fn(usize, &Seen) -> (u16, String) + Send + 'static,
    {
        use std::io::{BufRead, BufReader, Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/embed", listener.local_addr().unwrap());
        let seen = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for (index, stream) in listener.incoming().enumerate() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    headers.push_str(&line);
                }
                let mut body = vec![0u8; len];
                reader.read_exact(&mut body).unwrap();
                let req = Seen {
                    headers,
                    body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
                };
                let (status, text) = respond(index, &req);
                log.lock().unwrap().push(req);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        Self { url, seen }
    }

    pub fn requests(&self) -> usize {
        self.seen.lock().unwrap().len()
    }
}

/// Embedding of a string that depends on nothing else: length and byte sum.
pub fn echo_embedding(s: &str) -> Vec<f64> {
    vec![s.len() as f64, s.bytes().map(f64::from).sum(), 1.0]
}

pub fn echo_reply(req: &Seen) -> String {
    let rows: Vec<Vec<f64>> = req.body["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| echo_embedding(v.as_str().unwrap()))
        .collect();
    serde_json::json!({ "embeddings": rows }).to_string()
}
pub mod grad;
