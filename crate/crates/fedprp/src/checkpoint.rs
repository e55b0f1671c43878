//! Versioned binary checkpoints for the full federation state. The format is
//! deliberately dumb: magic, version, then length-prefixed little-endian
//! scalars. Floats are stored as raw bits so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{FedError, Result};
use crate::federation::{ClientState, FederationState};
use crate::model::{AffineLayer, PersonalParams, SharedParams};
use crate::numerics::Matrix;
use crate::prototypes::{EmpiricalPrototypes, GlobalPrototypes};

const MAGIC: &[u8; 8] = b"FPRPCKPT";
const VERSION: u32 = 1;

fn write_u64<W: Write>(out: &mut W, v: u64) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64<W: Write>(out: &mut W, v: f64) -> Result<()> {
    out.write_all(&v.to_bits().to_le_bytes())?;
    Ok(())
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(input)?))
}

fn read_usize<R: Read>(input: &mut R, what: &str) -> Result<usize> {
    let v = read_u64(input)?;
    usize::try_from(v).map_err(|_| FedError::Checkpoint(format!("{what} out of range: {v}")))
}

fn write_f64_slice<W: Write>(out: &mut W, values: &[f64]) -> Result<()> {
    write_u64(out, values.len() as u64)?;
    for v in values {
        write_f64(out, *v)?;
    }
    Ok(())
}

fn read_f64_vec<R: Read>(input: &mut R, what: &str) -> Result<Vec<f64>> {
    let n = read_usize(input, what)?;
    let mut values = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        values.push(read_f64(input)?);
    }
    Ok(values)
}

fn write_matrix<W: Write>(out: &mut W, m: &Matrix) -> Result<()> {
    write_u64(out, m.rows() as u64)?;
    write_u64(out, m.cols() as u64)?;
    for v in m.data() {
        write_f64(out, *v)?;
    }
    Ok(())
}

fn read_matrix<R: Read>(input: &mut R) -> Result<Matrix> {
    let rows = read_usize(input, "matrix rows")?;
    let cols = read_usize(input, "matrix cols")?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| FedError::Checkpoint("matrix size overflow".into()))?;
    let mut data = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        data.push(read_f64(input)?);
    }
    Matrix::from_vec(rows, cols, data)
}

fn write_shared<W: Write>(out: &mut W, mu: &SharedParams) -> Result<()> {
    write_u64(out, mu.layers().len() as u64)?;
    for layer in mu.layers() {
        write_matrix(out, &layer.weight)?;
        write_f64_slice(out, &layer.bias)?;
    }
    Ok(())
}

fn read_shared<R: Read>(input: &mut R) -> Result<SharedParams> {
    let n = read_usize(input, "layer count")?;
    let mut layers = Vec::with_capacity(n.min(1 << 10));
    for _ in 0..n {
        let weight = read_matrix(input)?;
        let bias = read_f64_vec(input, "bias length")?;
        if bias.len() != weight.rows() {
            return Err(FedError::Checkpoint("bias/weight shape mismatch".into()));
        }
        layers.push(AffineLayer { weight, bias });
    }
    SharedParams::from_layers(layers)
}

fn write_personal<W: Write>(out: &mut W, nu: &PersonalParams) -> Result<()> {
    write_matrix(out, &nu.weight)?;
    write_f64_slice(out, &nu.bias)
}

fn read_personal<R: Read>(input: &mut R) -> Result<PersonalParams> {
    let weight = read_matrix(input)?;
    let bias = read_f64_vec(input, "head bias length")?;
    if bias.len() != weight.rows() {
        return Err(FedError::Checkpoint("head bias/weight shape mismatch".into()));
    }
    Ok(PersonalParams { weight, bias })
}

fn write_centroid_map<W: Write>(out: &mut W, map: &BTreeMap<usize, Vec<f64>>) -> Result<()> {
    write_u64(out, map.len() as u64)?;
    for (class, centroid) in map {
        write_u64(out, *class as u64)?;
        write_f64_slice(out, centroid)?;
    }
    Ok(())
}

fn read_centroid_map<R: Read>(input: &mut R) -> Result<BTreeMap<usize, Vec<f64>>> {
    let n = read_usize(input, "centroid count")?;
    let mut map = BTreeMap::new();
    for _ in 0..n {
        let class = read_usize(input, "class id")?;
        let centroid = read_f64_vec(input, "centroid length")?;
        map.insert(class, centroid);
    }
    Ok(map)
}

fn write_empirical<W: Write>(out: &mut W, p: &EmpiricalPrototypes) -> Result<()> {
    write_u64(out, p.client_id as u64)?;
    write_centroid_map(out, p.centroids())?;
    write_u64(out, p.counts().len() as u64)?;
    for (class, count) in p.counts() {
        write_u64(out, *class as u64)?;
        write_u64(out, *count as u64)?;
    }
    Ok(())
}

fn read_empirical<R: Read>(input: &mut R) -> Result<EmpiricalPrototypes> {
    let client_id = read_usize(input, "client id")?;
    let centroids = read_centroid_map(input)?;
    let n = read_usize(input, "count entries")?;
    let mut counts = BTreeMap::new();
    for _ in 0..n {
        let class = read_usize(input, "class id")?;
        let count = read_usize(input, "class count")?;
        counts.insert(class, count);
    }
    if counts.len() != centroids.len() || counts.keys().ne(centroids.keys()) {
        return Err(FedError::Checkpoint("prototype count/centroid key mismatch".into()));
    }
    Ok(EmpiricalPrototypes::from_parts(client_id, centroids, counts))
}

/// Serialize the full state to a writer.
pub fn save_state<W: Write>(state: &FederationState, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    write_shared(&mut out, &state.global_mu)?;
    write_personal(&mut out, &state.global_nu)?;
    write_centroid_map(&mut out, state.global_protos.centroids())?;
    write_u64(&mut out, state.round)?;
    write_u64(&mut out, state.clients.len() as u64)?;
    for client in &state.clients {
        write_personal(&mut out, &client.nu)?;
        write_f64(&mut out, client.epsilon)?;
        match &client.protos {
            Some(p) => {
                write_u64(&mut out, 1)?;
                write_empirical(&mut out, p)?;
            }
            None => write_u64(&mut out, 0)?,
        }
        match &client.local_mu {
            Some(mu) => {
                write_u64(&mut out, 1)?;
                write_shared(&mut out, mu)?;
            }
            None => write_u64(&mut out, 0)?,
        }
    }
    Ok(())
}

/// Deserialize a state written by [`save_state`].
pub fn load_state<R: Read>(mut input: R) -> Result<FederationState> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FedError::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut version = [0u8; 4];
    input.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(FedError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let global_mu = read_shared(&mut input)?;
    let global_nu = read_personal(&mut input)?;
    let global_protos = GlobalPrototypes::from_centroids(read_centroid_map(&mut input)?);
    let round = read_u64(&mut input)?;
    let n_clients = read_usize(&mut input, "client count")?;
    let mut clients = Vec::with_capacity(n_clients.min(1 << 20));
    for _ in 0..n_clients {
        let nu = read_personal(&mut input)?;
        let epsilon = read_f64(&mut input)?;
        let protos = match read_u64(&mut input)? {
            0 => None,
            1 => Some(read_empirical(&mut input)?),
            v => return Err(FedError::Checkpoint(format!("bad option tag {v}"))),
        };
        let local_mu = match read_u64(&mut input)? {
            0 => None,
            1 => Some(read_shared(&mut input)?),
            v => return Err(FedError::Checkpoint(format!("bad option tag {v}"))),
        };
        clients.push(ClientState {
            nu,
            epsilon,
            protos,
            local_mu,
        });
    }
    // Trailing garbage means the file is not what we wrote.
    let mut probe = [0u8; 1];
    if input.read(&mut probe)? != 0 {
        return Err(FedError::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(FederationState {
        global_mu,
        global_nu,
        global_protos,
        round,
        clients,
    })
}

pub fn save_state_file<P: AsRef<Path>>(state: &FederationState, path: P) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    save_state(state, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_state_file<P: AsRef<Path>>(path: P) -> Result<FederationState> {
    let file = std::fs::File::open(path)?;
    load_state(std::io::BufReader::new(file))
}
