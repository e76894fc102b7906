//! Binary shard files plus a text index for random access.
//!
//! ```text
//! shard:  "VIVS" u32 version, u32 count, record*
//! record: u32 video_id, u16 H, u16 W, u16 T, u8 C, u16 nb, u16 boundary[nb],
//!         u16 label, u8 frames[T·H·W·C]
//! index.txt:      <video_id> <shard file> <byte offset>
//! metadata.jsonl: per-video ground truth that the record layout has no room for
//! ```
//! All integers are little-endian.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::videogen::{Corpus, VideoMeta, VideoRecord};

pub const MAGIC: &[u8; 4] = b"VIVS";
pub const VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.txt";
pub const METADATA_FILE: &str = "metadata.jsonl";

#[derive(Serialize, Deserialize)]
struct MetaLine {
    video_id: u32,
    #[serde(flatten)]
    meta: VideoMeta,
}

fn shard_name(i: usize) -> String {
    format!("shard-{i:05}.vivs")
}

fn u16_field(v: usize, what: &str, id: u32) -> Result<[u8; 2]> {
    u16::try_from(v)
        .map(u16::to_le_bytes)
        .map_err(|_| Error::invalid(format!("video {id}: {what} {v} does not fit in 16 bits")))
}

fn encode_record(v: &VideoRecord) -> Result<Vec<u8>> {
    let id = v.video_id;
    if v.frames.len() % v.frame_len() != 0 || v.channels > u8::MAX as usize {
        return Err(Error::invalid(format!("video {id}: inconsistent frame buffer")));
    }
    let mut out = Vec::with_capacity(16 + v.frames.len());
    out.extend(id.to_le_bytes());
    out.extend(u16_field(v.height, "height", id)?);
    out.extend(u16_field(v.width, "width", id)?);
    out.extend(u16_field(v.num_frames(), "frame count", id)?);
    out.push(v.channels as u8);
    out.extend(u16_field(v.boundaries.len(), "boundary count", id)?);
    for &b in &v.boundaries {
        out.extend(u16_field(b, "boundary", id)?);
    }
    out.extend(v.label.to_le_bytes());
    out.extend(&v.frames);
    Ok(out)
}

fn read_record<R: Read>(r: &mut R, path: &Path, record: &str) -> Result<VideoRecord> {
    let fmt = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        record: record.to_string(),
        msg: msg.to_string(),
    };
    let mut b4 = [0u8; 4];
    let mut b2 = [0u8; 2];
    let mut b1 = [0u8; 1];
    let mut u16_ = |r: &mut R| -> Result<usize> {
        r.read_exact(&mut b2).map_err(|_| fmt("truncated header"))?;
        Ok(u16::from_le_bytes(b2) as usize)
    };
    r.read_exact(&mut b4).map_err(|_| fmt("truncated header"))?;
    let video_id = u32::from_le_bytes(b4);
    let height = u16_(r)?;
    let width = u16_(r)?;
    let t = u16_(r)?;
    r.read_exact(&mut b1).map_err(|_| fmt("truncated header"))?;
    let channels = b1[0] as usize;
    let nb = u16_(r)?;
    let boundaries = (0..nb).map(|_| u16_(r)).collect::<Result<Vec<_>>>()?;
    let label = u16_(r)? as u16;
    if height == 0 || width == 0 || t == 0 || channels == 0 {
        return Err(fmt("zero extent"));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) || boundaries.iter().any(|&b| b == 0 || b >= t) {
        return Err(fmt("boundaries not strictly increasing within the video"));
    }
    let mut frames = vec![0u8; t * height * width * channels];
    r.read_exact(&mut frames).map_err(|_| fmt("truncated frames"))?;
    Ok(VideoRecord {
        video_id,
        height,
        width,
        channels,
        frames,
        boundaries,
        label,
        meta: None,
    })
}

/// Writes `shard-NNNNN.vivs` files, the index and (if present) per-video metadata.
pub fn write_shards(corpus: &Corpus, dir: &Path, videos_per_shard: usize) -> Result<Vec<PathBuf>> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot write an empty corpus"));
    }
    if videos_per_shard == 0 {
        return Err(Error::invalid("videos_per_shard must be >= 1"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    let mut paths = Vec::new();
    for (i, chunk) in corpus.videos.chunks(videos_per_shard).enumerate() {
        let name = shard_name(i);
        let path = dir.join(&name);
        let mut buf = Vec::new();
        buf.extend(MAGIC);
        buf.extend(VERSION.to_le_bytes());
        buf.extend((chunk.len() as u32).to_le_bytes());
        for v in chunk {
            index.push_str(&format!("{} {} {}\n", v.video_id, name, buf.len()));
            buf.extend(encode_record(v)?);
        }
        fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    let index_path = dir.join(INDEX_FILE);
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    let meta_path = dir.join(METADATA_FILE);
    if corpus.videos.iter().any(|v| v.meta.is_some()) {
        let mut w = BufWriter::new(File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?);
        for v in &corpus.videos {
            if let Some(meta) = &v.meta {
                let line = MetaLine {
                    video_id: v.video_id,
                    meta: meta.clone(),
                };
                let json = serde_json::to_string(&line).expect("metadata serializes");
                writeln!(w, "{json}").map_err(|e| Error::io(&meta_path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&meta_path, e))?;
    } else if meta_path.exists() {
        fs::remove_file(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    }
    Ok(paths)
}

fn read_metadata(dir: &Path) -> Result<HashMap<u32, VideoMeta>> {
    let path = dir.join(METADATA_FILE);
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let r = BufReader::new(File::open(&path).map_err(|e| Error::io(&path, e))?);
    let mut out = HashMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        let m: MetaLine = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.clone(),
            record: format!("line {}", i + 1),
            msg: e.to_string(),
        })?;
        out.insert(m.video_id, m.meta);
    }
    Ok(out)
}

/// Reads every shard listed in the index, in index order.
pub fn read_shards(dir: &Path) -> Result<Corpus> {
    let reader = ShardReader::open(dir)?;
    let mut shards: Vec<&str> = Vec::new();
    for (_, (shard, _)) in &reader.entries {
        if !shards.contains(&shard.as_str()) {
            shards.push(shard);
        }
    }
    let mut videos = Vec::with_capacity(reader.entries.len());
    for shard in shards {
        let path = dir.join(shard);
        let fmt = |msg: String| Error::Format {
            path: path.clone(),
            record: "header".into(),
            msg,
        };
        let mut r = BufReader::new(File::open(&path).map_err(|e| Error::io(&path, e))?);
        let mut head = [0u8; 12];
        r.read_exact(&mut head).map_err(|_| fmt("truncated shard header".into()))?;
        if &head[..4] != MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(head[8..12].try_into().unwrap());
        let ids: Vec<u32> = reader.entries.iter().filter(|(_, (s, _))| s == shard).map(|(id, _)| *id).collect();
        for i in 0..count as usize {
            let record = ids.get(i).map_or_else(|| format!("#{i}"), |id| format!("video {id}"));
            let mut v = read_record(&mut r, &path, &record)?;
            v.meta = reader.meta.get(&v.video_id).cloned();
            videos.push(v);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io(&path, e))? != 0 {
            return Err(fmt("trailing bytes after the last record".into()));
        }
    }
    Ok(Corpus { videos })
}

/// Random access by video id through the index; only the owning shard is opened.
pub struct ShardReader {
    dir: PathBuf,
    entries: Vec<(u32, (String, u64))>,
    lookup: HashMap<u32, usize>,
    meta: HashMap<u32, VideoMeta>,
    touched: BTreeSet<String>,
}

impl ShardReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        let mut lookup = HashMap::new();
        let mut last: Option<(String, u64)> = None;
        for (i, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Format {
                path: path.clone(),
                record: format!("line {}", i + 1),
                msg: msg.to_string(),
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [id, shard, offset] = parts[..] else {
                return Err(bad("expected `<video_id> <shard> <offset>`"));
            };
            let id: u32 = id.parse().map_err(|_| bad("bad video id"))?;
            let offset: u64 = offset.parse().map_err(|_| bad("bad offset"))?;
            if shard.contains('/') || shard.contains('\\') {
                return Err(bad("shard must be a file name"));
            }
            if let Some((s, o)) = &last {
                if s == shard && offset <= *o {
                    return Err(bad("offsets must strictly increase within a shard"));
                }
            }
            if lookup.insert(id, entries.len()).is_some() {
                return Err(bad("duplicate video id"));
            }
            last = Some((shard.to_string(), offset));
            entries.push((id, (shard.to_string(), offset)));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
            lookup,
            meta: read_metadata(dir)?,
            touched: BTreeSet::new(),
        })
    }

    pub fn video_ids(&self) -> Vec<u32> {
        self.entries.iter().map(|(id, _)| *id).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Shard files opened so far.
    pub fn touched(&self) -> &BTreeSet<String> {
        &self.touched
    }

    pub fn get(&mut self, video_id: u32) -> Result<VideoRecord> {
        let &i = self
            .lookup
            .get(&video_id)
            .ok_or_else(|| Error::invalid(format!("video {video_id} is not in the index")))?;
        let (shard, offset) = &self.entries[i].1;
        let path = self.dir.join(shard);
        self.touched.insert(shard.clone());
        let mut f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        f.seek(SeekFrom::Start(*offset)).map_err(|e| Error::io(&path, e))?;
        let mut v = read_record(&mut BufReader::new(f), &path, &format!("video {video_id}"))?;
        if v.video_id != video_id {
            return Err(Error::Format {
                path,
                record: format!("video {video_id}"),
                msg: format!("index points at video {}", v.video_id),
            });
        }
        v.meta = self.meta.get(&video_id).cloned();
        Ok(v)
    }
}
