//! Great-circle distances between cities and monthly travel distance.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IUGG mean Earth radius.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityLocation {
    pub city_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub country_id: String,
}

impl CityLocation {
    pub fn new(
        city_id: impl Into<String>,
        latitude: f64,
        longitude: f64,
        country_id: impl Into<String>,
    ) -> Result<Self> {
        let c = CityLocation {
            city_id: city_id.into(),
            latitude,
            longitude,
            country_id: country_id.into(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(Error::arg(format!(
                "latitude {} of {} outside [-90, 90]",
                self.latitude, self.city_id
            )));
        }
        if !(self.longitude > -180.0 && self.longitude <= 180.0) {
            return Err(Error::arg(format!(
                "longitude {} of {} outside (-180, 180]",
                self.longitude, self.city_id
            )));
        }
        Ok(())
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: &CityLocation, b: &CityLocation) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let (phi1, phi2) = (a.latitude.to_radians(), b.latitude.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.longitude - a.longitude).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TravelMode {
    /// Sum over distinct visited cities.
    #[default]
    Sum,
    /// Mean over distinct visited cities.
    Mean,
    /// Sum over visits; a city visited twice counts twice.
    PerVisit,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TravelDistance {
    pub km: f64,
    /// Visited cities without coordinates, excluded from the total.
    pub unknown_cities: usize,
}

/// Travel distance for one user-period. `visits` may repeat cities; the home
/// city is ignored wherever it appears.
pub fn monthly_travel_distance<'a, I>(
    home: &CityLocation,
    visits: I,
    gazetteer: &Gazetteer,
    mode: TravelMode,
) -> Result<TravelDistance>
where
    I: IntoIterator<Item = &'a str>,
{
    let visits: Vec<&str> = visits.into_iter().filter(|c| *c != home.city_id).collect();
    let cities: Vec<&str> = match mode {
        TravelMode::PerVisit => visits,
        _ => visits.into_iter().collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut unknown = 0usize;
    for c in cities {
        match gazetteer.get(c) {
            Some(loc) => {
                total += haversine_km(home, loc)?;
                counted += 1;
            }
            None => unknown += 1,
        }
    }
    let km = match mode {
        TravelMode::Mean if counted > 0 => total / counted as f64,
        _ => total,
    };
    Ok(TravelDistance {
        km,
        unknown_cities: unknown,
    })
}

/// City id → location.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    cities: HashMap<String, CityLocation>,
}

impl Gazetteer {
    pub fn new(cities: impl IntoIterator<Item = CityLocation>) -> Result<Self> {
        let mut map = HashMap::new();
        for c in cities {
            c.validate()?;
            if map.contains_key(&c.city_id) {
                return Err(Error::arg(format!("duplicate city_id {}", c.city_id)));
            }
            map.insert(c.city_id.clone(), c);
        }
        Ok(Gazetteer { cities: map })
    }

    pub fn get(&self, city_id: &str) -> Option<&CityLocation> {
        self.cities.get(city_id)
    }

    pub fn country_of(&self, city_id: &str) -> Option<&str> {
        self.cities.get(city_id).map(|c| c.country_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.cities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cities.is_empty()
    }

    /// Cities sorted by id.
    pub fn sorted(&self) -> Vec<&CityLocation> {
        let mut v: Vec<_> = self.cities.values().collect();
        v.sort_by(|a, b| a.city_id.cmp(&b.city_id));
        v
    }

    /// Reads a tab-separated `city_id, latitude, longitude, country_id` file
    /// with a header row.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .from_path(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut cities = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let field = |k: usize| rec.get(k).unwrap_or_default().trim();
            let num = |k: usize| -> Result<f64> {
                field(k).parse().map_err(|_| {
                    Error::Format(format!(
                        "{} line {}: bad coordinate `{}`",
                        path.display(),
                        i + 2,
                        field(k)
                    ))
                })
            };
            cities.push(CityLocation {
                city_id: field(0).to_string(),
                latitude: num(1)?,
                longitude: num(2)?,
                country_id: field(3).to_string(),
            });
        }
        Gazetteer::new(cities)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
        let fmt_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["city_id", "latitude", "longitude", "country_id"])
            .map_err(fmt_err)?;
        for c in self.sorted() {
            w.write_record([
                c.city_id.clone(),
                c.latitude.to_string(),
                c.longitude.to_string(),
                c.country_id.clone(),
            ])
            .map_err(fmt_err)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn city(id: &str, lat: f64, lon: f64) -> CityLocation {
        CityLocation::new(id, lat, lon, "X").unwrap()
    }

    #[test]
    fn identical_points_are_zero() {
        let a = city("a", 12.5, -40.0);
        assert_eq!(haversine_km(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn antipodes_are_half_circumference() {
        let a = city("a", 0.0, 0.0);
        let b = city("b", 0.0, 180.0);
        let d = haversine_km(&a, &b).unwrap();
        assert!((d - std::f64::consts::PI * EARTH_RADIUS_KM).abs() < 1e-6);
        assert!((d - 20015.1).abs() < 0.1);
    }

    #[test]
    fn out_of_range_coordinates_are_rejected() {
        assert!(CityLocation::new("x", 91.0, 0.0, "X").is_err());
        assert!(CityLocation::new("x", 0.0, -180.0, "X").is_err());
        let bad = CityLocation {
            city_id: "x".into(),
            latitude: 0.0,
            longitude: 200.0,
            country_id: "X".into(),
        };
        assert!(haversine_km(&bad, &bad).is_err());
    }

    #[test]
    fn travel_modes() {
        let home = city("home", 0.0, 0.0);
        let a = city("a", 0.0, 1.0);
        let b = city("b", 1.0, 0.0);
        let gaz = Gazetteer::new([home.clone(), a.clone(), b.clone()]).unwrap();
        let da = haversine_km(&home, &a).unwrap();
        let db = haversine_km(&home, &b).unwrap();

        let none = monthly_travel_distance(&home, ["home", "home"], &gaz, TravelMode::Sum).unwrap();
        assert_eq!(none.km, 0.0);

        let visits = ["a", "home", "b", "a"];
        let sum = monthly_travel_distance(&home, visits, &gaz, TravelMode::Sum).unwrap();
        assert!((sum.km - (da + db)).abs() < 1e-12);
        let mean = monthly_travel_distance(&home, visits, &gaz, TravelMode::Mean).unwrap();
        assert!((mean.km - (da + db) / 2.0).abs() < 1e-12);
        let per_visit = monthly_travel_distance(&home, visits, &gaz, TravelMode::PerVisit).unwrap();
        assert!((per_visit.km - (2.0 * da + db)).abs() < 1e-12);

        let unknown = monthly_travel_distance(&home, ["a", "nowhere"], &gaz, TravelMode::Sum).unwrap();
        assert_eq!(unknown.unknown_cities, 1);
        assert!((unknown.km - da).abs() < 1e-12);
    }

    fn coord() -> impl Strategy<Value = (f64, f64)> {
        (-90.0f64..=90.0, -179.999f64..=180.0)
    }

    proptest! {
        #[test]
        fn adding_a_city_never_shrinks_the_sum(extra in coord(), picks in prop::collection::vec(0usize..4, 0..6)) {
            let home = city("home", 10.0, 10.0);
            let gaz = Gazetteer::new([
                home.clone(),
                city("c0", 0.0, 0.0),
                city("c1", 50.0, 5.0),
                city("c2", -30.0, 100.0),
                city("c3", 60.0, -120.0),
                city("new", extra.0, extra.1),
            ])
            .unwrap();
            let names: Vec<String> = picks.iter().map(|p| format!("c{p}")).collect();
            let before = monthly_travel_distance(&home, names.iter().map(String::as_str), &gaz, TravelMode::Sum).unwrap().km;
            let after = monthly_travel_distance(&home, names.iter().map(String::as_str).chain(["new"]), &gaz, TravelMode::Sum).unwrap().km;
            prop_assert!(after >= before);
        }
    }
}
